"""Mask-weighted training losses.

Every loss takes a 0/1 weight array and returns the weighted mean of the
per-entry loss.  Entries with weight 0 are removed with a select before any
arithmetic, so their targets and parameters cannot influence the value or
its gradient, whatever they hold.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, log, log_gamma, logaddexp, maximum, where
from .errors import DomainError, UndefinedLossError

GNLL_EPS = 1e-6

LOSS_KINDS = ("mae", "mse", "gnll", "nb", "zinb")


def loss_weights(M: np.ndarray, N: np.ndarray, scope: str = "masked_only") -> np.ndarray:
    """``(1 - M) * N`` for masked-only training, ``N`` for all valid entries."""
    if scope == "masked_only":
        return (1.0 - np.asarray(M)) * np.asarray(N)
    if scope == "all_valid":
        return np.asarray(N, dtype=np.float64).copy()
    raise ValueError(f"unknown loss scope {scope!r}")


def _prepare(T, weights):
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise UndefinedLossError("all loss weights are zero")
    sel = w > 0
    T_safe = np.where(sel, np.asarray(T, dtype=np.float64), 0.0)
    return w, sel, T_safe, total


def _weighted_mean(per_entry: Tensor, w: np.ndarray, sel: np.ndarray, total: float) -> Tensor:
    return (where(sel, per_entry, 0.0) * w).sum() * (1.0 / total)


def _select(x: Tensor, sel: np.ndarray, fill: float) -> Tensor:
    # parameters at weight-0 entries are replaced by a harmless constant
    return where(sel, as_tensor(x), fill)


def loss_mae(pred, T, weights) -> Tensor:
    w, sel, T_safe, total = _prepare(T, weights)
    diff = _select(pred, sel, 0.0) - T_safe
    return _weighted_mean(diff.abs(), w, sel, total)


def loss_mse(pred, T, weights) -> Tensor:
    w, sel, T_safe, total = _prepare(T, weights)
    diff = _select(pred, sel, 0.0) - T_safe
    return _weighted_mean(diff * diff, w, sel, total)


def loss_gnll(mean, var, T, weights, eps: float = GNLL_EPS) -> Tensor:
    w, sel, T_safe, total = _prepare(T, weights)
    v = maximum(_select(var, sel, 1.0), eps)
    diff = _select(mean, sel, 0.0) - T_safe
    per = 0.5 * (diff * diff / v + log(v))
    return _weighted_mean(per, w, sel, total)


def _check_nb_domain(T, n: Tensor, p: Tensor) -> None:
    T = np.asarray(T)
    if np.any(T < 0) or not np.isfinite(T).all():
        raise DomainError("negative binomial: counts must be finite and >= 0")
    if np.any(~(n.data > 0)):
        raise DomainError("negative binomial: n must be > 0")
    if np.any(~((p.data > 0) & (p.data < 1))):
        raise DomainError("negative binomial: p must lie in (0, 1)")


def nb_log_pmf(T, n, p) -> Tensor:
    """``lnΓ(T+n) - lnΓ(T+1) - lnΓ(n) + n ln p + T ln(1-p)``; ``T`` may be non-integer."""
    n, p = as_tensor(n), as_tensor(p)
    T = np.asarray(T, dtype=np.float64)
    _check_nb_domain(T, n, p)
    return log_gamma(n + T) - log_gamma(Tensor(T + 1.0)) - log_gamma(n) + n * log(p) + T * log(1.0 - p)


def zinb_log_pmf(T, n, p, pi) -> Tensor:
    """Zero-inflated NB log mass; the zero branch is ``log(pi + (1-pi) p^n)``."""
    n, p, pi = as_tensor(n), as_tensor(p), as_tensor(pi)
    T = np.asarray(T, dtype=np.float64)
    if np.any(~((pi.data >= 0) & (pi.data < 1))):
        raise DomainError("zero-inflated NB: pi must lie in [0, 1)")
    log_keep = log(1.0 - pi)
    nb_zero = log_keep + n * log(p)
    no_inflation = pi.data == 0
    if no_inflation.any():
        # pi = 0 has no log; those entries reduce to the plain NB zero mass
        pi_safe = where(no_inflation, 0.5, pi)
        ll_zero = where(no_inflation, nb_zero, logaddexp(log(pi_safe), nb_zero))
    else:
        ll_zero = logaddexp(log(pi), nb_zero)
    ll_pos = log_keep + nb_log_pmf(T, n, p)
    return where(T == 0, ll_zero, ll_pos)


def loss_nb(n, p, T, weights) -> Tensor:
    w, sel, T_safe, total = _prepare(T, weights)
    n = _select(n, sel, 1.0)
    p = _select(p, sel, 0.5)
    return _weighted_mean(-nb_log_pmf(T_safe, n, p), w, sel, total)


def loss_zinb(n, p, pi, T, weights) -> Tensor:
    w, sel, T_safe, total = _prepare(T, weights)
    n = _select(n, sel, 1.0)
    p = _select(p, sel, 0.5)
    pi = _select(pi, sel, 0.5)
    return _weighted_mean(-zinb_log_pmf(T_safe, n, p, pi), w, sel, total)
