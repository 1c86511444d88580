"""Integrated-gradients feature attribution with absolute-sum aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor, concat, fresh_tape
from .checkpoint import Checkpoint
from .errors import ConfigError, ParameterError
from .model import predict_expected
from .pipeline import Experiment, model_input


def integrated_gradients(f: Callable[[Tensor], Tensor], x, baseline=None, steps: int = 50) -> np.ndarray:
    """Path-integrated gradients of scalar ``f`` from ``baseline`` (zeros) to ``x``.

    Uses the midpoint rule: gradients are taken at ``baseline + a (x - baseline)``
    for ``a = (s - 1/2) / steps``, ``s = 1..steps``, then averaged and scaled by
    ``x - baseline``.
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if base.shape != x.shape:
        raise ParameterError(f"baseline shape {base.shape} != input shape {x.shape}")
    delta = x - base
    total = np.zeros_like(x)
    for s in range(1, steps + 1):
        point = Tensor(base + ((s - 0.5) / steps) * delta, requires_grad=True)
        with fresh_tape():
            out = f(point)
            out.backward()
        if point.grad is not None:
            total += point.grad
    return delta * (total / steps)


def completeness_gap(f: Callable[[Tensor], Tensor], x, attributions, baseline=None) -> float:
    """Relative gap ``|sum IG - (f(x) - f(baseline))| / |f(x) - f(baseline)|``."""
    x = np.asarray(x, dtype=np.float64)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    with fresh_tape():
        diff = float(f(Tensor(x)).data) - float(f(Tensor(base)).data)
    gap = abs(float(np.sum(attributions)) - diff)
    return gap / abs(diff) if diff != 0 else gap


# ---------------------------------------------------------------------------
# model wrapper
# ---------------------------------------------------------------------------


@dataclass
class AttributionInput:
    """One interpolation-posture window ready for attribution."""

    x: np.ndarray  # (nodes, h, k_raw) scaled feature channels
    f: Callable[[Tensor], Tensor]
    channel_names: list


def model_target(ckpt: Checkpoint, exp: Experiment, seen, targets, t0: int) -> AttributionInput:
    """Scalar ``f`` = sum of expected predictions of the masked (target) nodes over one window.

    Only the raw feature channels are attributed.  The indicator channels
    and the masked target channel stay at their actual values along the
    path; with everything at zero the bias-free graph layers followed by
    layer normalization would make ``f`` a step function of the path
    position.
    """
    cfg = ckpt.cfg
    if not cfg.features or exp.X.shape[2] == 0:
        raise ConfigError("attribution needs a model trained with node features")
    model = ckpt.model
    seen = np.asarray(seen, dtype=int)
    targets = np.asarray(targets, dtype=int)
    idx = np.arange(exp.panel.n) if cfg.entire_graph else np.concatenate([seen, targets])
    pos = {int(v): i for i, v in enumerate(idx)}
    tpos = np.array([pos[int(v)] for v in targets], dtype=int)
    known = np.zeros(exp.panel.n, dtype=bool)
    known[seen] = True
    known[targets] = True
    h = cfg.h
    t1 = min(t0 + h, exp.panel.P)
    pad = h - (t1 - t0)
    M = np.ones((idx.size, h))
    M[tpos] = 0.0
    N = exp.N[idx, t0:t1] * known[idx][:, None]
    if pad:
        N = np.concatenate([N, np.zeros((idx.size, pad))], axis=1)
    H0 = model_input(exp, idx, t0, t1, M, N, pad).data
    full = H0.reshape(idx.size, h, -1)
    k_raw = exp.X.shape[2]
    x, fixed = full[:, :, :k_raw], full[:, :, k_raw:]
    tps = exp.transition_pairs(idx)
    weight = np.zeros((idx.size, h))
    weight[tpos, : t1 - t0] = 1.0

    def f(xt: Tensor) -> Tensor:
        H = concat([xt, Tensor(fixed)], axis=2).reshape(idx.size, -1)
        return (predict_expected(model.forward(H, tps)) * weight).sum()

    return AttributionInput(x=x.copy(), f=f, channel_names=list(exp.panel.feature_names))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class AttributionReport:
    channel_scores: dict
    groups: list = field(default_factory=list)  # dicts: group, members, scores, sum, mean
    channel_group: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"channel_scores": self.channel_scores, "groups": self.groups}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "group", "score"])
        for ch, score in self.channel_scores.items():
            w.writerow([ch, self.channel_group.get(ch, ch), repr(float(score))])
        return buf.getvalue()


def read_grouping(path) -> list[tuple[str, str]]:
    """Parse a ``channel_name,group_name`` mapping file (an optional header is skipped)."""
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if len(row) != 2:
                raise ConfigError(f"{path}: expected 'channel_name,group_name', got {row!r}")
            ch, grp = row[0].strip(), row[1].strip()
            if (ch, grp) == ("channel_name", "group_name") or (ch, grp) == ("channel", "group"):
                continue
            pairs.append((ch, grp))
    return pairs


def aggregate(attributions, channel_names, grouping=None) -> AttributionReport:
    """Absolute-sum scores per channel over all leading axes, then merged into groups.

    ``attributions`` has channels on the last axis.  ``grouping`` is a mapping
    or a list of ``(channel, group)`` pairs; ungrouped channels become
    singleton groups.
    """
    A = np.asarray(attributions, dtype=np.float64)
    names = list(channel_names)
    if A.shape[-1] != len(names):
        raise ParameterError(f"{A.shape[-1]} attribution channels but {len(names)} names")
    scores = np.abs(A).reshape(-1, len(names)).sum(axis=0)
    channel_scores = {n: float(s) for n, s in zip(names, scores)}

    pairs = list(grouping.items()) if isinstance(grouping, dict) else list(grouping or [])
    channel_group: dict[str, str] = {}
    for ch, grp in pairs:
        if ch in channel_group and channel_group[ch] != grp:
            raise ConfigError(f"channel {ch!r} is assigned to both {channel_group[ch]!r} and {grp!r}")
        channel_group[ch] = grp
    unknown = sorted(set(channel_group) - set(names))
    if unknown:
        raise ConfigError(f"grouping names unknown channels {unknown}")

    members: dict[str, list[str]] = {}
    for n in names:
        members.setdefault(channel_group.get(n, n), []).append(n)
    groups = []
    for grp, chans in members.items():
        s = sum(channel_scores[c] for c in chans)
        groups.append(
            {"group": grp, "members": chans, "scores": [channel_scores[c] for c in chans], "sum": s, "mean": s / len(chans)}
        )
    groups.sort(key=lambda g: -g["sum"])
    return AttributionReport(channel_scores, groups, {n: channel_group.get(n, n) for n in names})


def attribute_checkpoint(ckpt: Checkpoint, exp: Experiment, windows: int = 4, steps: int = 50, grouping=None):
    """Attribute test-node predictions on the first ``windows`` test chunks; returns (report, mean gap)."""
    times = exp.times("test")
    seen = np.concatenate([exp.train_idx, exp.val_idx])
    total = None
    gaps = []
    names = None
    for c in range(min(windows, int(np.ceil(times.size / ckpt.cfg.h)))):
        t0 = int(times[c * ckpt.cfg.h])
        inp = model_target(ckpt, exp, seen, exp.test_idx, t0)
        ig = integrated_gradients(inp.f, inp.x, steps=steps)
        gaps.append(completeness_gap(inp.f, inp.x, ig))
        a = np.abs(ig).reshape(-1, ig.shape[-1]).sum(axis=0)
        total = a if total is None else total + a
        names = inp.channel_names
    if total is None:
        raise ParameterError("no evaluation windows to attribute")
    return aggregate(total[None, :], names, grouping), float(np.mean(gaps))


def write_report(report: AttributionReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attribution.csv").write_text(report.to_csv())
    (out / "attribution.json").write_text(report.to_json())
