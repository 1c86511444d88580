"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradient recording is enabled
appends an entry to the thread's current :class:`Tape`.  ``backward`` replays
the tape in reverse from the root, accumulating into ``.grad`` of leaf tensors
created with ``requires_grad=True``.  Leaf gradients accumulate across calls;
callers zero them between optimizer steps.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, StaleTapeError

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "no_grad",
    "fresh_tape",
    "as_tensor",
    "matmul",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "log_gamma",
    "unary",
    "abs_",
    "square",
    "concat",
    "where",
    "clip",
    "maximum",
    "logaddexp",
    "layer_norm",
    "lgamma_np",
    "digamma_np",
    "grad_check",
]


class Tape:
    """Ordered record of executed operations.

    Each entry is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` for inputs that
    receive nothing).
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.generation = 0

    def __len__(self):
        return len(self.entries)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: Callable) -> None:
        out._tape = self
        out._generation = self.generation
        out._index = len(self.entries)
        self.entries.append((out, inputs, fn))

    def clear(self) -> None:
        self.entries = []
        self.generation += 1


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def fresh_tape():
    """Install a new tape for the duration of the block, then clear it."""
    prev = getattr(_local, "tape", None)
    prev_enabled = _grad_enabled()
    tape = _local.tape = Tape()
    _local.enabled = True
    try:
        yield tape
    finally:
        tape.clear()
        _local.tape = prev
        _local.enabled = prev_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_generation", "_index")
    # make numpy defer to the reflected Tensor operators (ndarray * Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._generation = -1
        self._index: int | None = None

    # construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, inputs: tuple["Tensor", ...], fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._tape = None
        out._generation = -1
        out._index = None
        track = _grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = track
        if track:
            current_tape().record(out, inputs, fn)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._index is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._result(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        c = float(exponent)
        a = self.data
        if c != int(c) and np.any(a < 0):
            raise DomainError(f"pow: negative base with non-integer exponent at index {_first_bad(a < 0)}")
        return Tensor._result(a**c, (self,), lambda g: (g * c * a ** (c - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    # shape ops --------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        src = self.shape

        def back(g):
            full = np.zeros(src)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(self.data[idx], (self,), back)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise conveniences
    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    # differentiation --------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar root, got shape {self.shape}")
        if self.is_leaf:
            if not self.requires_grad:
                raise StaleTapeError("root is not connected to any tape (no input requires grad)")
            self.grad = (self.grad if self.grad is not None else 0.0) + np.ones_like(self.data)
            return
        tape = self._tape
        if tape is None or self._generation != tape.generation:
            raise StaleTapeError("tape holding this tensor was cleared; rerun the forward pass")
        _run_backward(tape, self)


def _run_backward(tape: Tape, root: Tensor) -> None:
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, inputs, fn in reversed(tape.entries[: root._index + 1]):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, ig in zip(inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor._result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return Tensor._result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return Tensor._result(out, (x,), lambda g: (g * _sigmoid_np(v),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    bad = ~(v > 0)
    if bad.any():
        raise DomainError(f"log: non-positive input {v[bad].flat[0]!r} at index {_first_bad(bad)}")
    return Tensor._result(np.log(v), (x,), lambda g: (g / v,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    return Tensor._result(np.abs(v), (x,), lambda g: (g * np.sign(v),))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    return Tensor._result(v * v, (x,), lambda g: (2.0 * g * v,))


# Lanczos approximation, g=7, 9 coefficients.
_LANCZOS_G = 7.0
_LANCZOS = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _lanczos_parts(x: np.ndarray):
    # x >= 0.5 assumed; returns lgamma(x) and digamma(x)
    z = x - 1.0
    a = np.full_like(z, _LANCZOS[0])
    da = np.zeros_like(z)
    for i in range(1, 9):
        d = z + i
        a += _LANCZOS[i] / d
        da -= _LANCZOS[i] / (d * d)
    t = z + _LANCZOS_G + 0.5
    log_t = np.log(t)
    lg = _HALF_LOG_2PI + (z + 0.5) * log_t - t + np.log(a)
    dg = log_t + (z + 0.5) / t - 1.0 + da / a
    return lg, dg


def _lgamma_digamma(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    lg = np.empty_like(x)
    dg = np.empty_like(x)
    hi = x >= 0.5
    if hi.any():
        lg[hi], dg[hi] = _lanczos_parts(x[hi])
    lo = ~hi
    if lo.any():
        # reflection: Γ(x)Γ(1-x) = π / sin(πx)
        xl = x[lo]
        lg1, dg1 = _lanczos_parts(1.0 - xl)
        lg[lo] = math.log(math.pi) - np.log(np.abs(np.sin(math.pi * xl))) - lg1
        dg[lo] = dg1 - math.pi / np.tan(math.pi * xl)
    return lg, dg


def lgamma_np(x) -> np.ndarray:
    return _lgamma_digamma(np.asarray(x, dtype=np.float64))[0]


def digamma_np(x) -> np.ndarray:
    return _lgamma_digamma(np.asarray(x, dtype=np.float64))[1]


def log_gamma(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    bad = ~(v > 0)
    if bad.any():
        raise DomainError(f"log_gamma: non-positive input {v[bad].flat[0]!r} at index {_first_bad(bad)}")
    lg, dg = _lgamma_digamma(v)
    return Tensor._result(lg, (x,), lambda g: (g * dg,))


_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "log_gamma": log_gamma,
}


def unary(op: str, x) -> Tensor:
    try:
        fn = _UNARY[op]
    except KeyError:
        raise ContractError(f"unknown unary op {op!r}; expected one of {sorted(_UNARY)}") from None
    return fn(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``.  ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._result(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    v = x.data
    inside = (v >= lo) & (v <= hi)
    return Tensor._result(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a constant floor."""
    x = as_tensor(x)
    v = x.data
    keep = v >= floor
    return Tensor._result(np.where(keep, v, floor), (x,), lambda g: (g * keep,))


def logaddexp(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * np.exp(a.data - out), a.shape), _unbroadcast(g * np.exp(b.data - out), b.shape)),
    )


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation of a 2-D tensor followed by an affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-D input, got shape {x.shape}")
    d = x.shape[1]
    if d < 1:
        raise DimensionError("layer_norm needs at least one column")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if not eps > 0:
        raise DomainError("layer_norm eps must be positive")
    v = x.data
    xc = v - v.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor._result(xhat * gd + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a tensor, array, or a sequence of tensors; ``f`` receives them as
    positional arguments and must return a scalar tensor.  The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not step > 0:
        raise DomainError("grad_check step must be positive")
    items = list(x) if isinstance(x, (list, tuple)) else [x]
    # tensors are perturbed in place so closures over them see the change
    xs = [t if isinstance(t, Tensor) else Tensor(t) for t in items]
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad, t.grad = True, None
    try:
        with fresh_tape():
            out = f(*xs)
            if out.data.size != 1:
                raise ContractError("grad_check: f must return a scalar")
            if not np.isfinite(out.data).all():
                raise DomainError("grad_check: f is not finite at x")
            if out.requires_grad:
                out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad, t.grad = rg, g

    worst = 0.0
    with no_grad():
        for t, ana in zip(xs, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*xs).data.reshape(-1)[0])
                flat[i] = orig - step
                fm = float(f(*xs).data.reshape(-1)[0])
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise DomainError(f"grad_check: f not finite near index {i}")
                num = (fp - fm) / (2.0 * step)
                denom = max(abs(ana_flat[i]), abs(num), 1e-8)
                worst = max(worst, abs(ana_flat[i] - num) / denom)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
