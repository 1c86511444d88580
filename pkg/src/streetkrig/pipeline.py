"""Glue between panels, graphs and the model: input preparation, loss
dispatch and windowed inference in interpolation posture."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .config import TrainConfig
from .dataio import Panel, ScaleRecord, SplitPlan, fit_scaler
from .graph import Graph, TransitionPair, transitions
from .losses import loss_gnll, loss_mae, loss_mse, loss_nb, loss_zinb
from .model import DGCN, HeadOutput, build_h0, predict_expected
from .sampler import augment_features


@dataclass
class Experiment:
    """Arrays and index sets shared by training and evaluation."""

    cfg: TrainConfig
    panel: Panel
    graphs: list[Graph]
    split: SplitPlan
    record: ScaleRecord
    X: np.ndarray  # scaled features (n, P, k_raw); k_raw = 0 without features
    T: np.ndarray  # raw targets
    T_scaled: np.ndarray
    N: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def in_channels(self) -> int:
        return self.X.shape[2] + (2 if self.cfg.indicators else 0)

    def times(self, part: str) -> np.ndarray:
        return self.split.time_range(part, self.panel.P)

    def transition_pairs(self, idx: np.ndarray) -> list[TransitionPair]:
        key = idx.tobytes()
        if key not in self._cache:
            self._cache[key] = [transitions(g.W[np.ix_(idx, idx)]) for g in self.graphs]
        return self._cache[key]


def prepare(panel: Panel, graphs, split: SplitPlan, cfg: TrainConfig, record: ScaleRecord | None = None) -> Experiment:
    graphs = [graphs] if isinstance(graphs, Graph) else list(graphs)
    for g in graphs:
        if list(map(str, g.node_ids)) != list(map(str, panel.node_ids)):
            raise ValueError("graph node order must match the panel node order")
    if not cfg.features:
        panel = panel.drop_features()
    lookup = {str(nid): i for i, nid in enumerate(panel.node_ids)}
    train_idx = np.array([lookup[str(i)] for i in split.train_ids], dtype=int)
    val_idx = np.array([lookup[str(i)] for i in split.val_ids], dtype=int)
    test_idx = np.array([lookup[str(i)] for i in split.test_ids], dtype=int)
    if record is None:
        record = fit_scaler(panel, train_idx, split.time_range("train", panel.P))
    X = record.scale_features(panel.X_raw)
    return Experiment(
        cfg=cfg,
        panel=panel,
        graphs=graphs,
        split=split,
        record=record,
        X=X,
        T=panel.T,
        T_scaled=record.scale_target(panel.T),
        N=panel.N,
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
    )


def build_model(exp: Experiment, seed: int | None = None) -> DGCN:
    cfg = exp.cfg
    return DGCN(
        exp.in_channels,
        cfg.h,
        z=cfg.z,
        K=cfg.K,
        head=cfg.head_kind,
        towers=len(exp.graphs),
        seed=cfg.seed if seed is None else seed,
        ln_eps=cfg.ln_eps,
    )


def head_loss(out: HeadOutput, loss: str, T_raw, T_scaled, weights):
    if loss == "mae":
        return loss_mae(out.mean, T_scaled, weights)
    if loss == "mse":
        return loss_mse(out.mean, T_scaled, weights)
    if loss == "gnll":
        return loss_gnll(out.mean, out.var, T_scaled, weights)
    if loss == "nb":
        return loss_nb(out.n, out.p, T_raw, weights)
    if loss == "zinb":
        return loss_zinb(out.n, out.p, out.pi, T_raw, weights)
    raise ValueError(f"unknown loss {loss!r}")


def model_input(exp: Experiment, idx: np.ndarray, t0: int, t1: int, M: np.ndarray, N: np.ndarray, pad: int = 0):
    """Build ``H0`` for nodes ``idx`` over ``[t0, t1)``, zero-padded by ``pad`` steps."""
    X = exp.X[idx, t0:t1, :]
    T_in = exp.T_scaled[idx, t0:t1]
    if pad:
        X = np.concatenate([X, np.zeros((X.shape[0], pad, X.shape[2]))], axis=1)
        T_in = np.concatenate([T_in, np.zeros((T_in.shape[0], pad))], axis=1)
    X_s = augment_features(X, M, N) if exp.cfg.indicators else X
    return build_h0(X_s, T_in * M * N)


@dataclass
class Interpolation:
    """Predictions for target nodes over a time range, in raw units."""

    node_idx: np.ndarray  # target rows of the panel
    times: np.ndarray
    pred: np.ndarray  # (targets, len(times))
    T: np.ndarray
    T_scaled: np.ndarray
    N: np.ndarray  # true missing mask of the targets
    head: str
    params: dict  # head parameter arrays aligned with pred
    chunks: list  # (start, stop) per window, for coverage checks

    def loss(self, loss_kind: str) -> float:
        from .autodiff import Tensor

        w = self.N
        if w.sum() == 0:
            return float("nan")
        out = HeadOutput(self.head, **{k: Tensor(v) for k, v in self.params.items()})
        with no_grad():
            return float(head_loss(out, loss_kind, self.T, self.T_scaled, w).data)


def interpolate_nodes(
    model: DGCN, exp: Experiment, seen: Sequence[int], targets: Sequence[int], times: np.ndarray
) -> Interpolation:
    """Predict ``targets`` from the targets of ``seen`` in consecutive ``h`` windows.

    Graph membership follows the entire-graph flag: every node, or only
    seen plus target nodes.  Nodes outside both sets contribute features
    only (missing mask 0).  A trailing partial window is zero-padded and the
    pad is excluded through the missing mask.
    """
    cfg = exp.cfg
    seen = np.asarray(seen, dtype=int)
    targets = np.asarray(targets, dtype=int)
    n = exp.panel.n
    if cfg.entire_graph:
        idx = np.arange(n)
    else:
        idx = np.concatenate([seen, targets])
    pos = {int(v): i for i, v in enumerate(idx)}
    tpos = np.array([pos[int(v)] for v in targets], dtype=int)
    known = np.zeros(n, dtype=bool)
    known[seen] = True
    known[targets] = True
    tps = exp.transition_pairs(idx)

    h = cfg.h
    times = np.asarray(times, dtype=int)
    L = times.size
    pred = np.zeros((targets.size, L))
    params: dict[str, np.ndarray] = {}
    chunks = []
    with no_grad():
        for c0 in range(0, L, h):
            c1 = min(c0 + h, L)
            t0, t1 = int(times[c0]), int(times[c0]) + (c1 - c0)
            pad = h - (c1 - c0)
            M = np.ones((idx.size, h))
            M[tpos] = 0.0
            N = exp.N[idx, t0:t1] * known[idx][:, None]
            if pad:
                N = np.concatenate([N, np.zeros((idx.size, pad))], axis=1)
            out = model.forward(model_input(exp, idx, t0, t1, M, N, pad), tps)
            expected = predict_expected(out).data
            if out.kind in ("mae", "gnll"):
                expected = exp.record.unscale_target(expected)
            pred[:, c0:c1] = expected[tpos, : c1 - c0]
            for name in ("mean", "var", "n", "p", "pi"):
                val = getattr(out, name)
                if val is not None:
                    params.setdefault(name, np.zeros((targets.size, L)))[:, c0:c1] = val.data[tpos, : c1 - c0]
            chunks.append((c0, c1))
    cols = times
    return Interpolation(
        node_idx=targets,
        times=times,
        pred=pred,
        T=exp.T[np.ix_(targets, cols)],
        T_scaled=exp.T_scaled[np.ix_(targets, cols)],
        N=exp.N[np.ix_(targets, cols)],
        head=model.head,
        params=params,
        chunks=chunks,
    )


def interpolate_part(model: DGCN, exp: Experiment, part: str) -> Interpolation:
    if part == "val":
        return interpolate_nodes(model, exp, exp.train_idx, exp.val_idx, exp.times("val"))
    if part == "test":
        seen = np.concatenate([exp.train_idx, exp.val_idx])
        return interpolate_nodes(model, exp, seen, exp.test_idx, exp.times("test"))
    raise ValueError(f"unknown evaluation part {part!r}")
