"""Masked training samples that rehearse interpolation on known nodes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError, SamplingError
from .graph import TransitionPair, transitions


@dataclass
class WindowSchedule:
    h: int
    batch_size: int
    S: int
    starts: list[int]

    def batches(self) -> list[list[int]]:
        """Window starts grouped into optimizer steps; the last group may be short."""
        b = self.batch_size
        return [self.starts[i : i + b] for i in range(0, len(self.starts), b)]


def schedule(P: int, h: int, batch_size: int = 1, shuffle_seed=None, offset: int = 0) -> WindowSchedule:
    """Non-overlapping windows ``offset + {0, h, 2h, ...}``; a trailing partial window is dropped."""
    if h < 1 or batch_size < 1:
        raise ParameterError("window length and batch size must be >= 1")
    if h > P:
        raise ParameterError(f"window length {h} exceeds the {P} available time steps")
    starts = [offset + i * h for i in range(P // h)]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(starts))
        starts = [starts[i] for i in order]
    return WindowSchedule(h, batch_size, P // (h * batch_size), starts)


@dataclass
class TrainingSample:
    node_idx: np.ndarray  # rows of the panel, ordered observed, masked, extra
    window: tuple[int, int]
    X_s: np.ndarray  # (nodes, h, k)
    T_s: np.ndarray  # (nodes, h) raw targets
    T_s_masked: np.ndarray
    M_s: np.ndarray  # 0 = masked
    N_s: np.ndarray  # 0 = missing
    W_s: np.ndarray
    n_o: int
    n_m: int

    _tp: TransitionPair | None = None

    @property
    def transition_pair(self) -> TransitionPair:
        if self._tp is None:
            self._tp = transitions(self.W_s)
        return self._tp


def augment_features(X_raw_slice: np.ndarray, M_s: np.ndarray, N_s: np.ndarray) -> np.ndarray:
    """Append the mask and missing indicators as the last two channels."""
    X_raw_slice = np.asarray(X_raw_slice, dtype=np.float64)
    if X_raw_slice.ndim != 3 or M_s.shape != X_raw_slice.shape[:2] or N_s.shape != X_raw_slice.shape[:2]:
        raise DimensionError(
            f"indicator shapes {M_s.shape}/{N_s.shape} do not match features {X_raw_slice.shape}"
        )
    return np.concatenate([X_raw_slice, M_s[:, :, None], N_s[:, :, None]], axis=2)


def sample_sizes(n_eligible: int, mask_ratio: float = 0.25, sample_fraction: float = 1.0) -> tuple[int, int]:
    total = max(1, int(round(sample_fraction * n_eligible)))
    total = min(total, n_eligible)
    n_m = min(total, max(1, int(round(mask_ratio * total))))
    return total - n_m, n_m


def draw_sample(
    X: np.ndarray,
    T: np.ndarray,
    N: np.ndarray,
    W: np.ndarray,
    window: tuple[int, int],
    n_o: int,
    n_m: int,
    rng: np.random.Generator,
    eligible: Sequence[int],
    extra: Sequence[int] = (),
    indicators: bool = True,
) -> TrainingSample:
    """Slice one masked sample from panel arrays.

    ``X`` is ``(n, P, k_raw)`` (already scaled), ``T`` and ``N`` are ``(n, P)``.
    ``n_o + n_m`` nodes are drawn without replacement from ``eligible``; the
    last ``n_m`` of them are masked.  ``extra`` nodes (entire-graph mode) join
    with their features only: their missing mask is forced to 0 so their
    targets never reach the input or the loss.
    """
    eligible = np.asarray(eligible, dtype=int)
    if n_m < 1:
        raise SamplingError("at least one node must be masked")
    if n_o < 0 or n_o + n_m > eligible.size:
        raise SamplingError(f"cannot draw {n_o}+{n_m} nodes from {eligible.size} eligible training nodes")
    chosen = rng.choice(eligible, size=n_o + n_m, replace=False)
    extra = np.asarray([i for i in extra if i not in set(chosen.tolist())], dtype=int)
    idx = np.concatenate([chosen, extra]).astype(int)
    t0, t1 = window
    T_s = T[idx, t0:t1].copy()
    N_s = N[idx, t0:t1].copy()
    N_s[n_o + n_m :] = 0.0
    M_s = np.ones_like(T_s)
    M_s[n_o : n_o + n_m] = 0.0
    X_raw = X[idx, t0:t1, :]
    X_s = augment_features(X_raw, M_s, N_s) if indicators else X_raw.copy()
    return TrainingSample(
        node_idx=idx,
        window=(t0, t1),
        X_s=X_s,
        T_s=T_s,
        T_s_masked=T_s * M_s * N_s,
        M_s=M_s,
        N_s=N_s,
        W_s=W[np.ix_(idx, idx)],
        n_o=n_o,
        n_m=n_m,
    )
