"""Test-time interpolation and evaluation metrics.

Metrics read only entries of unseen nodes that were actually observed, i.e.
where ``(1 - M) * N == 1``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .checkpoint import Checkpoint, check_compatible
from .errors import UndefinedMetricError
from .graph import Graph
from .model import HeadOutput
from .pipeline import head_loss, interpolate_part, prepare

KL_BINS = 50
KL_EPS = 1e-9
TAU = 0.99
CSV_COLUMNS = ["variant", "head", "adjacency", "coverage", "mae", "rmse", "kl", "zero", "nll", "n_entries", "seed"]


@dataclass
class EvalBundle:
    T: np.ndarray  # raw targets
    pred: np.ndarray  # predictions in raw units
    M: np.ndarray  # 0 = unseen node
    N: np.ndarray  # 0 = missing
    h: int = 1
    head: str = "mae"
    params: dict = field(default_factory=dict)  # head parameters aligned with pred
    T_loss: np.ndarray | None = None  # targets in the head's own space (scaled for gnll)
    node_ids: list = field(default_factory=list)
    times: np.ndarray | None = None
    chunks: list = field(default_factory=list)

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.M = np.broadcast_to(np.asarray(self.M, dtype=np.float64), self.T.shape)
        self.N = np.broadcast_to(np.asarray(self.N, dtype=np.float64), self.T.shape)
        if self.pred.shape != self.T.shape:
            raise ValueError(f"prediction shape {self.pred.shape} != target shape {self.T.shape}")

    @property
    def weights(self) -> np.ndarray:
        return (1.0 - self.M) * self.N

    @property
    def n_entries(self) -> int:
        return int((self.weights > 0).sum())

    def _selected(self):
        sel = self.weights > 0
        if not sel.any():
            raise UndefinedMetricError("no evaluated entries (every unseen-node target is missing)")
        return sel


def interpolate(ckpt: Checkpoint, panel, graphs, split=None, part: str = "test") -> EvalBundle:
    """Predict the ``part`` nodes of ``split`` (default: the checkpoint's split)."""
    graphs = [graphs] if isinstance(graphs, Graph) else list(graphs)
    check_compatible(ckpt, panel, graphs)
    exp = prepare(panel, graphs, split or ckpt.split, ckpt.cfg, record=ckpt.record)
    res = interpolate_part(ckpt.model, exp, part)
    return EvalBundle(
        T=res.T,
        pred=res.pred,
        M=np.zeros_like(res.T),
        N=res.N,
        h=ckpt.cfg.h,
        head=res.head,
        params=res.params,
        T_loss=res.T_scaled if res.head in ("mae", "gnll") else res.T,
        node_ids=[panel.node_ids[i] for i in res.node_idx],
        times=res.times,
        chunks=res.chunks,
    )


def metric_mae(b: EvalBundle) -> float:
    sel = b._selected()
    w = b.weights[sel]
    return float(np.sum(w * np.abs(b.pred[sel] - b.T[sel])) / np.sum(w))


def metric_rmse(b: EvalBundle) -> float:
    sel = b._selected()
    w = b.weights[sel]
    return float(math.sqrt(np.sum(w * (b.pred[sel] - b.T[sel]) ** 2) / np.sum(w)))


def kl_divergence(q_true, q_pred, eps: float = KL_EPS) -> float:
    """KL(true || pred) between two histograms after additive smoothing."""
    a = np.asarray(q_true, dtype=np.float64) + eps
    b = np.asarray(q_pred, dtype=np.float64) + eps
    a, b = a / a.sum(), b / b.sum()
    nz = a > 0
    return float(max(0.0, np.sum(a[nz] * np.log(a[nz] / b[nz]))))


def binned_histograms(true_vals, pred_vals, bins: int = KL_BINS):
    true_vals = np.asarray(true_vals, dtype=np.float64)
    pred_vals = np.asarray(pred_vals, dtype=np.float64)
    both = np.concatenate([true_vals, pred_vals])
    lo, hi = float(both.min()), float(both.max())
    edges = np.histogram_bin_edges(both, bins=bins, range=(lo, hi))
    return np.histogram(true_vals, edges)[0], np.histogram(pred_vals, edges)[0], edges


def metric_kl(b: EvalBundle, bins: int = KL_BINS, eps: float = KL_EPS) -> float:
    sel = b._selected()
    h_true, h_pred, _ = binned_histograms(b.T[sel], b.pred[sel], bins)
    return kl_divergence(h_true, h_pred, eps)


def true_zero_rate(b: EvalBundle, tau: float = TAU) -> float | None:
    """Share of observed true zeros predicted below ``tau``; None without true zeros."""
    zeros = (b.weights > 0) & (b.T == 0)
    if not zeros.any():
        return None
    return float(np.mean(np.abs(b.pred[zeros]) < tau))


def metric_nll(b: EvalBundle) -> float | None:
    """Weighted mean negative log-likelihood under the head's own distribution."""
    if b.head == "mae":
        return None
    sel = b._selected()
    out = HeadOutput(b.head, **{k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in b.params.items()})
    T_loss = b.T if b.T_loss is None else b.T_loss
    loss = {"gnll": "gnll", "nb": "nb", "zinb": "zinb"}[b.head]
    with no_grad():
        val = head_loss(out, loss, np.where(sel, b.T, 0.0), np.where(sel, T_loss, 0.0), b.weights)
    return float(val.data)


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    kl: float
    true_zero_rate: float | None
    nll: float | None
    n_entries: int
    head: str
    kl_bins: int = KL_BINS
    kl_eps: float = KL_EPS
    kl_direction: str = "KL(true||pred)"
    tau: float = TAU

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, variant: str = "", adjacency: str = "", coverage=None, seed=None) -> dict:
        return {
            "variant": variant,
            "head": self.head,
            "adjacency": adjacency,
            "coverage": "" if coverage is None else coverage,
            "mae": self.mae,
            "rmse": self.rmse,
            "kl": self.kl,
            "zero": "" if self.true_zero_rate is None else self.true_zero_rate,
            "nll": "" if self.nll is None else self.nll,
            "n_entries": self.n_entries,
            "seed": "" if seed is None else seed,
        }


def evaluate(b: EvalBundle, tau: float = TAU, bins: int = KL_BINS, eps: float = KL_EPS) -> MetricsReport:
    return MetricsReport(
        mae=metric_mae(b),
        rmse=metric_rmse(b),
        kl=metric_kl(b, bins, eps),
        true_zero_rate=true_zero_rate(b, tau),
        nll=metric_nll(b),
        n_entries=b.n_entries,
        head=b.head,
        kl_bins=bins,
        kl_eps=eps,
        tau=tau,
    )


def rows_to_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
