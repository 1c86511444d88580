"""Node-time panels: loading, cleaning, scaling, synthetic generation and splits.

Targets and the missing mask are stored as ``(n, P)`` arrays; the trailing
unit channel axis is implicit.  ``N == 0`` marks a missing cell, whose target
value is stored as 0.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError, ParameterError, ParseError, SplitError
from .graph import Graph, grid_graph


@dataclass
class Panel:
    node_ids: list
    time_index: list
    X_raw: np.ndarray  # (n, P, k_raw)
    T: np.ndarray  # (n, P)
    N: np.ndarray  # (n, P), 1 = observed
    feature_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.node_ids = list(self.node_ids)
        self.time_index = list(self.time_index)
        n, P = len(self.node_ids), len(self.time_index)
        self.X_raw = np.asarray(self.X_raw, dtype=np.float64).reshape(n, P, -1)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(n, P)
        self.N = np.asarray(self.N, dtype=np.float64).reshape(n, P)
        if not self.feature_names:
            self.feature_names = [f"feat_{i + 1}" for i in range(self.k_raw)]
        if len(self.feature_names) != self.k_raw:
            raise ParameterError("feature_names length does not match the feature channel count")
        self.T = np.where(self.N > 0, self.T, 0.0)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def P(self) -> int:
        return len(self.time_index)

    @property
    def k_raw(self) -> int:
        return self.X_raw.shape[2]

    def drop_features(self) -> "Panel":
        return replace(self, X_raw=np.zeros((self.n, self.P, 0)), feature_names=[])

    def observed_count(self) -> int:
        return int(self.N.sum())


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _sort_times(times: list[str]) -> list[str]:
    try:
        return sorted(times, key=lambda t: float(t))
    except ValueError:
        return sorted(times)


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{where}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"{where}: non-finite value {text!r}")
    return value


def load_panel(features_file, targets_file) -> Panel:
    """Read a long-format targets CSV and an optional features CSV.

    ``targets_file`` has columns ``node_id,time,value``; a blank value or an
    absent (node, time) row is a missing observation.  ``features_file`` is
    either long (``node_id,time,f1..fk``, one row per cell) or wide
    (``node_id,f1..fk`` without a time column, constant over time).  Pass
    ``None`` (or a nonexistent path) for a target-only panel.
    """
    targets: dict[tuple[str, str], float | None] = {}
    node_order: dict[str, None] = {}
    time_set: dict[str, None] = {}
    with open(targets_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["node_id", "time"]:
            raise ParseError(f"{targets_file}: expected header node_id,time,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ParseError(f"{targets_file}:{lineno}: too few columns")
            key = (row[0].strip(), row[1].strip())
            if key in targets:
                raise IngestionError(f"{targets_file}:{lineno}: duplicate row for node {key[0]!r} time {key[1]!r}")
            cell = row[2].strip() if len(row) > 2 else ""
            targets[key] = None if cell == "" else _parse_float(cell, f"{targets_file}:{lineno}")
            node_order.setdefault(key[0])
            time_set.setdefault(key[1])

    nodes = list(node_order)
    times = _sort_times(list(time_set))
    ni = {v: i for i, v in enumerate(nodes)}
    ti = {v: i for i, v in enumerate(times)}
    T = np.zeros((len(nodes), len(times)))
    N = np.zeros_like(T)
    for (nid, t), v in targets.items():
        if v is not None:
            if v < 0:
                raise IngestionError(f"{targets_file}: negative target {v} at node {nid!r} time {t!r}")
            T[ni[nid], ti[t]] = v
            N[ni[nid], ti[t]] = 1.0

    if features_file is None or not Path(features_file).exists():
        return Panel(nodes, times, np.zeros((len(nodes), len(times), 0)), T, N)

    with open(features_file, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if not header or header[0] != "node_id":
            raise ParseError(f"{features_file}: first column must be node_id")
        long_format = len(header) > 1 and header[1] == "time"
        names = header[2:] if long_format else header[1:]
        X = np.full((len(nodes), len(times), len(names)), np.nan)
        seen: set = set()
        offenders: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            nid = row[0].strip()
            t = row[1].strip() if long_format else None
            key = (nid, t)
            if key in seen:
                raise IngestionError(f"{features_file}:{lineno}: duplicate row for node {nid!r} time {t!r}")
            seen.add(key)
            if nid not in ni or (long_format and t not in ti):
                offenders.append(f"{nid}@{t}" if long_format else nid)
                continue
            body = row[2:] if long_format else row[1:]
            if len(body) != len(names):
                raise ParseError(f"{features_file}:{lineno}: expected {len(names)} feature values, got {len(body)}")
            vals = [_parse_float(c.strip(), f"{features_file}:{lineno}:{names[j]}") for j, c in enumerate(body)]
            if long_format:
                X[ni[nid], ti[t]] = vals
            else:
                X[ni[nid], :] = vals
        holes = np.argwhere(np.isnan(X).any(axis=2))
        for i, j in holes[:10]:
            offenders.append(f"{nodes[i]}@{times[j]} (no feature row)")
        if offenders:
            raise IngestionError(f"feature/target keys misaligned; first offenders: {offenders[:10]}")
    return Panel(nodes, times, X, T, N, feature_names=names)


def write_panel(panel: Panel, features_file, targets_file) -> None:
    with open(targets_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "time", "value"])
        for i, nid in enumerate(panel.node_ids):
            for j, t in enumerate(panel.time_index):
                w.writerow([nid, t, repr(float(panel.T[i, j])) if panel.N[i, j] > 0 else ""])
    with open(features_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "time", *panel.feature_names])
        for i, nid in enumerate(panel.node_ids):
            for j, t in enumerate(panel.time_index):
                w.writerow([nid, t, *(repr(float(v)) for v in panel.X_raw[i, j])])


# ---------------------------------------------------------------------------
# cleaning and encoding
# ---------------------------------------------------------------------------


def outlier_filter(panel: Panel, n_std: float = 3.0) -> Panel:
    """Mark observations more than ``n_std`` population standard deviations
    from their node's mean as missing."""
    N = panel.N.copy()
    for i in range(panel.n):
        obs = panel.N[i] > 0
        if not obs.any():
            continue
        vals = panel.T[i, obs]
        mu, sd = vals.mean(), vals.std()
        flag = obs & (np.abs(panel.T[i] - mu) > n_std * sd)
        N[i, flag] = 0.0
    return replace(panel, T=np.where(N > 0, panel.T, 0.0), N=N)


def one_hot(panel: Panel, channels: Sequence[int], labels: dict[int, list] | None = None):
    """Replace each categorical channel by indicator channels.

    ``labels`` fixes the label set per channel (e.g. learned on training
    data); values not in it encode to all zeros with a warning.  Returns the
    new panel and the label map used.
    """
    channels = sorted(set(channels))
    if not channels:
        return panel, {}
    labels = dict(labels) if labels else {}
    blocks, names = [], []
    for c in range(panel.k_raw):
        col = panel.X_raw[:, :, c]
        if c not in channels:
            blocks.append(col[:, :, None])
            names.append(panel.feature_names[c])
            continue
        levels = labels.setdefault(c, sorted(np.unique(col).tolist()))
        enc = np.stack([(col == lv).astype(np.float64) for lv in levels], axis=2)
        unseen = enc.sum(axis=2) == 0
        if unseen.any():
            warnings.warn(f"channel {panel.feature_names[c]!r}: {int(unseen.sum())} cell(s) carry unseen labels")
        blocks.append(enc)
        names.extend(f"{panel.feature_names[c]}={lv:g}" for lv in levels)
    X = np.concatenate(blocks, axis=2) if blocks else np.zeros((panel.n, panel.P, 0))
    return replace(panel, X_raw=X, feature_names=names), labels


@dataclass
class ScaleRecord:
    feature_min: np.ndarray
    feature_max: np.ndarray
    target_min: float
    target_max: float

    @staticmethod
    def _apply(x, lo, hi):
        span = hi - lo
        return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)

    def scale_features(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] == 0:
            return X.copy()
        return self._apply(X, self.feature_min, self.feature_max)

    def scale_target(self, T: np.ndarray) -> np.ndarray:
        return self._apply(np.asarray(T, dtype=np.float64), self.target_min, self.target_max)

    def unscale_target(self, S: np.ndarray) -> np.ndarray:
        return np.asarray(S) * (self.target_max - self.target_min) + self.target_min

    def unscale_features(self, S: np.ndarray) -> np.ndarray:
        return S * (self.feature_max - self.feature_min) + self.feature_min

    def to_dict(self) -> dict:
        return {
            "feature_min": [float(v) for v in self.feature_min],
            "feature_max": [float(v) for v in self.feature_max],
            "target_min": float(self.target_min),
            "target_max": float(self.target_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleRecord":
        return cls(
            np.asarray(d["feature_min"], dtype=np.float64),
            np.asarray(d["feature_max"], dtype=np.float64),
            float(d["target_min"]),
            float(d["target_max"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ScaleRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_scaler(panel: Panel, node_idx=None, time_idx=None) -> ScaleRecord:
    """Per-channel min/max over the given training nodes and times."""
    nodes = np.arange(panel.n) if node_idx is None else np.asarray(node_idx, dtype=int)
    times = np.arange(panel.P) if time_idx is None else np.asarray(time_idx, dtype=int)
    X = panel.X_raw[np.ix_(nodes, times)] if panel.k_raw else np.zeros((1, 1, 0))
    fmin = X.reshape(-1, panel.k_raw).min(axis=0) if X.size else np.zeros(panel.k_raw)
    fmax = X.reshape(-1, panel.k_raw).max(axis=0) if X.size else np.zeros(panel.k_raw)
    T = panel.T[np.ix_(nodes, times)]
    obs = panel.N[np.ix_(nodes, times)] > 0
    tmin = float(T[obs].min()) if obs.any() else 0.0
    tmax = float(T[obs].max()) if obs.any() else 0.0
    return ScaleRecord(fmin, fmax, tmin, tmax)


def minmax_scale(panel: Panel, node_idx=None, time_idx=None, record: ScaleRecord | None = None):
    """Min-max scale feature channels using training statistics.

    The target stays in raw units on the panel; ``record.scale_target`` maps
    it into the model's input space.  Values outside the training range may
    scale outside [0, 1].
    """
    record = record or fit_scaler(panel, node_idx, time_idx)
    return replace(panel, X_raw=record.scale_features(panel.X_raw)), record


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTH_FEATURES = ["street_class", "landuse", "weekly_cycle", "weather", "noise"]


def synth_generate(
    n_nodes: int,
    P: int,
    k_raw: int = 4,
    zero_inflation: float = 0.5,
    seed: int = 0,
    missing_rate: float = 0.01,
    dispersion: float = 2.0,
    mean_count: float = 12.0,
) -> tuple[Panel, Graph]:
    """Zero-inflated count panel on a grid street network.

    Node log-intensity mixes a node-specific "street class" with a spatially
    smooth land-use field, a weekly cycle and a shared weather factor, then is
    smoothed over grid neighbours.  Each cell is a structural zero with a
    node-dependent probability averaging ``zero_inflation``; otherwise it is a
    negative-binomial count.  Feature channels beyond the first four are
    uninformative noise.
    """
    if not 0.0 <= zero_inflation < 1.0:
        raise ParameterError(f"zero_inflation must lie in [0, 1), got {zero_inflation}")
    if n_nodes < 2 or P < 1 or k_raw < 0:
        raise ParameterError("need n_nodes >= 2, P >= 1, k_raw >= 0")
    rng = np.random.default_rng(seed)
    rows = int(math.floor(math.sqrt(n_nodes)))
    cols = int(math.ceil(n_nodes / rows))
    ids = [f"s{i:04d}" for i in range(rows * cols)]
    full = grid_graph(rows, cols, ids)
    keep = ids[:n_nodes]
    A = full.W[:n_nodes, :n_nodes]
    graph = Graph(keep, A, kind="binary")

    deg = A.sum(axis=1)
    neigh_mean = np.divide(A, deg[:, None], out=np.zeros_like(A), where=deg[:, None] > 0)

    street_class = rng.integers(0, 4, size=n_nodes).astype(float)
    landuse = rng.normal(size=n_nodes)
    for _ in range(3):
        landuse = 0.5 * landuse + 0.5 * neigh_mean @ landuse
    landuse = (landuse - landuse.mean()) / (landuse.std() + 1e-12)
    t = np.arange(P)
    weekly = np.sin(2.0 * math.pi * t / 7.0)
    weather = np.zeros(P)
    shocks = rng.normal(scale=0.5, size=P)
    for j in range(P):
        weather[j] = (0.7 * weather[j - 1] if j else 0.0) + shocks[j]

    static = 0.6 * (street_class - 1.5) + 0.5 * landuse
    static = 0.7 * static + 0.3 * neigh_mean @ static
    log_mu = static[:, None] + 0.35 * weekly[None, :] + 0.25 * weather[None, :]
    log_mu += rng.normal(scale=0.1, size=log_mu.shape)
    mu = np.exp(log_mu)
    mu *= mean_count / mu.mean()

    if zero_inflation > 0:
        logit0 = math.log(zero_inflation / (1.0 - zero_inflation))
        z = (street_class - street_class.mean()) / (street_class.std() + 1e-12)
        pi = 1.0 / (1.0 + np.exp(-(logit0 - 1.2 * z)))
        pi = np.broadcast_to(pi[:, None], mu.shape)
    else:
        pi = np.zeros_like(mu)
    nb_p = dispersion / (dispersion + mu)
    counts = rng.negative_binomial(dispersion, nb_p).astype(np.float64)
    structural = rng.random(mu.shape) < pi
    T = np.where(structural, 0.0, counts)
    N = (rng.random(T.shape) >= missing_rate).astype(np.float64)

    channels = [
        np.broadcast_to(street_class[:, None], (n_nodes, P)),
        np.broadcast_to(landuse[:, None], (n_nodes, P)),
        np.broadcast_to(weekly[None, :], (n_nodes, P)),
        np.broadcast_to(weather[None, :], (n_nodes, P)),
    ]
    names = SYNTH_FEATURES[:4]
    extra = 0
    while len(channels) < k_raw:
        channels.append(np.broadcast_to(rng.normal(size=n_nodes)[:, None], (n_nodes, P)))
        names.append(f"noise_{extra}")
        extra += 1
    X = np.stack(channels[:k_raw], axis=2) if k_raw else np.zeros((n_nodes, P, 0))
    panel = Panel(keep, list(range(P)), X, T, N, feature_names=names[:k_raw])
    panel.meta.update(mu=mu, pi=np.array(pi), dispersion=dispersion)
    return panel, graph


def synth_expected_zero_share(panel: Panel) -> float:
    """Zero share implied by the generating ZINB parameters of a synthetic panel."""
    mu, pi, r = panel.meta["mu"], panel.meta["pi"], panel.meta["dispersion"]
    nb_zero = (r / (r + mu)) ** r
    return float(np.mean(pi + (1.0 - pi) * nb_zero))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    test_ids: list
    train_ids: list
    val_ids: list
    coverage_fraction: float
    temporal_mode: str = "within"
    time_boundaries: tuple = ()

    def __post_init__(self):
        a, b, c = set(self.test_ids), set(self.train_ids), set(self.val_ids)
        if a & (b | c) or b & c:
            raise SplitError("split partitions overlap")

    def time_range(self, part: str, P: int) -> np.ndarray:
        """Time indices used for ``part`` in {"train", "val", "test"}."""
        if self.temporal_mode == "within" or not self.time_boundaries:
            return np.arange(P)
        t1, t2 = self.time_boundaries
        return {"train": np.arange(0, t1), "val": np.arange(t1, t2), "test": np.arange(t2, P)}[part]

    def to_dict(self) -> dict:
        return {
            "test_ids": list(self.test_ids),
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "coverage_fraction": self.coverage_fraction,
            "temporal_mode": self.temporal_mode,
            "time_boundaries": list(self.time_boundaries),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            d["test_ids"], d["train_ids"], d["val_ids"], d["coverage_fraction"], d["temporal_mode"], tuple(d["time_boundaries"])
        )


TEMPORAL_MODES = ("within", "future")


def _ceil(x: float) -> int:
    return int(math.ceil(round(x, 9)))


def make_split(
    node_ids: Sequence,
    coverage_fraction: float = 0.9,
    temporal_mode: str = "within",
    seed: int = 0,
    P: int | None = None,
) -> SplitPlan:
    """Fixed 10% test nodes; nested training prefix of one shuffle of the rest.

    Train takes the first ``ceil(0.9 f n)`` shuffled non-test nodes and
    validation the next ``ceil(0.1 f n)``, so lower coverages give subsets of
    higher ones under the same seed.  ``future`` mode also cuts time 70/15/15.
    """
    if not 0.0 < coverage_fraction <= 0.9:
        raise SplitError(f"coverage_fraction must lie in (0, 0.9], got {coverage_fraction}")
    if temporal_mode not in TEMPORAL_MODES:
        raise SplitError(f"unknown temporal mode {temporal_mode!r}")
    ids = list(node_ids)
    n = len(ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(0.1 * n)))
    test = [ids[i] for i in perm[:n_test]]
    rest = [ids[i] for i in rng.permutation(perm[n_test:])]
    n_train = _ceil(0.9 * coverage_fraction * n)
    n_val = min(_ceil(0.1 * coverage_fraction * n), len(rest) - n_train)
    if n_train < 1 or n_val < 1:
        raise SplitError(f"coverage {coverage_fraction} leaves an empty train or validation set for n={n}")
    bounds: tuple = ()
    if temporal_mode == "future":
        if P is None:
            raise SplitError("future mode needs the number of time steps P")
        t1, t2 = int(round(0.7 * P)), int(round(0.85 * P))
        if not 0 < t1 < t2 < P:
            raise SplitError(f"P={P} too short for a 70/15/15 time split")
        bounds = (t1, t2)
    return SplitPlan(test, rest[:n_train], rest[n_train : n_train + n_val], coverage_fraction, temporal_mode, bounds)
