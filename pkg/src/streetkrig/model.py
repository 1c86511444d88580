"""Three-layer diffusion graph convolutional network with distribution heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, clip, concat, layer_norm, relu, sigmoid, softplus
from .errors import ConfigError, DimensionError
from .graph import TransitionPair, chebyshev_apply

HEAD_KINDS = ("mae", "gnll", "nb", "zinb")
LOSS_TO_HEAD = {"mae": "mae", "mse": "mae", "gnll": "gnll", "nb": "nb", "zinb": "zinb"}

EPS_N = 1e-6
EPS_VAR = 1e-6
P_CLAMP = 1e-6
PI_CLAMP = 1e-6


@dataclass
class HeadOutput:
    kind: str
    mean: Tensor | None = None
    var: Tensor | None = None
    n: Tensor | None = None
    p: Tensor | None = None
    pi: Tensor | None = None


def build_h0(X_s, T_masked) -> Tensor:
    """Append the masked target as an extra channel and flatten ``(h, k+1)`` per node.

    The flattened column for time ``t`` and channel ``c`` is ``t * (k + 1) + c``
    (time-major, channel-minor); the target is the last channel.
    """
    X_s, T_masked = as_tensor(X_s), as_tensor(T_masked)
    if X_s.ndim != 3:
        raise DimensionError(f"features must be (nodes, h, k), got {X_s.shape}")
    n, h, k = X_s.shape
    if T_masked.shape != (n, h):
        raise DimensionError(f"target shape {T_masked.shape} does not match features {X_s.shape}")
    stacked = concat([X_s, T_masked.reshape(n, h, 1)], axis=2)
    return stacked.reshape(n, h * (k + 1))


def unflatten_h0(H0: np.ndarray, h: int) -> np.ndarray:
    n, width = H0.shape
    return H0.reshape(n, h, width // h)


def predict_expected(out: HeadOutput) -> Tensor:
    if out.kind in ("mae", "gnll"):
        return out.mean
    p = clip(out.p, P_CLAMP, 1.0 - P_CLAMP)
    nb_mean = out.n * (1.0 - p) / p
    if out.kind == "nb":
        return nb_mean
    return (1.0 - out.pi) * nb_mean


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DGCN:
    """Parameters and forward pass of one or two stacked DGCN towers plus a head.

    Each layer holds one weight block per Chebyshev order and direction,
    stored stacked as ``(2K * d_in, d_out)`` in the order
    ``[fwd_1..fwd_K, bwd_1..bwd_K]``.  Layer 3 is ``h`` wide for the ``mae``
    head (its output is the prediction) and ``z`` wide otherwise; 1x1 output
    maps then project ``z`` (or ``2z`` with two towers) to ``h``.
    """

    def __init__(
        self,
        in_channels: int,
        h: int,
        z: int = 100,
        K: int = 2,
        head: str = "zinb",
        towers: int = 1,
        seed: int = 0,
        ln_eps: float = 1e-5,
    ):
        if head not in HEAD_KINDS:
            raise ConfigError(f"unknown head {head!r}; expected one of {HEAD_KINDS}")
        if towers not in (1, 2):
            raise ConfigError("only one or two adjacency towers are supported")
        if towers == 2 and head == "mae":
            raise ConfigError("the mae head has no output map to merge two towers; use gnll, nb or zinb")
        if K < 1 or h < 1 or z < 1:
            raise ConfigError("K, h and z must all be >= 1")
        self.in_channels = in_channels
        self.h, self.z, self.K = h, z, K
        self.head = head
        self.towers = towers
        self.ln_eps = ln_eps
        rng = np.random.default_rng(seed)
        d_in = h * (in_channels + 1)
        d_last = h if head == "mae" else z
        self.params: dict[str, Tensor] = {}
        for s in range(towers):
            widths = [(d_in, z), (z, z), (z, d_last)]
            for layer, (a, b) in enumerate(widths, start=1):
                self.params[f"t{s}.theta{layer}"] = Tensor(
                    _glorot(rng, 2 * K * a, b, (2 * K * a, b)), requires_grad=True
                )
                self.params[f"t{s}.ln{layer}.gain"] = Tensor(np.ones(b), requires_grad=True)
                self.params[f"t{s}.ln{layer}.bias"] = Tensor(np.zeros(b), requires_grad=True)
        head_in = towers * z
        outs = {"mae": [], "gnll": ["mean", "var"], "nb": ["n", "p"], "zinb": ["n", "p", "pi"]}[head]
        for name in outs:
            self.params[f"head.{name}.w"] = Tensor(_glorot(rng, head_in, h, (head_in, h)), requires_grad=True)
            self.params[f"head.{name}.b"] = Tensor(np.zeros(h), requires_grad=True)

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise DimensionError(f"parameter {k}: expected shape {v.shape}, got {arr.shape}")
            v.data = arr.reshape(v.shape).copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "h": self.h,
            "z": self.z,
            "K": self.K,
            "head": self.head,
            "towers": self.towers,
            "ln_eps": self.ln_eps,
        }

    # -- forward -------------------------------------------------------------
    def _dgcn(self, tower: int, layer: int, H: Tensor, tp: TransitionPair) -> Tensor:
        parts = chebyshev_apply(tp.Wf, H, self.K) + chebyshev_apply(tp.Wb, H, self.K)
        return concat(parts, axis=1) @ self.params[f"t{tower}.theta{layer}"]

    def _ln(self, tower: int, layer: int, H: Tensor) -> Tensor:
        return layer_norm(
            H, self.params[f"t{tower}.ln{layer}.gain"], self.params[f"t{tower}.ln{layer}.bias"], self.ln_eps
        )

    def tower_forward(self, H0, tp: TransitionPair, tower: int = 0) -> Tensor:
        H0 = as_tensor(H0)
        n = H0.shape[0]
        if tp.Wf.shape != (n, n):
            raise DimensionError(f"transition matrix {tp.Wf.shape} does not match {n} nodes")
        expected = self.h * (self.in_channels + 1)
        if H0.shape[1] != expected:
            raise DimensionError(f"H0 width {H0.shape[1]} != h*(k+1) = {expected}")
        H1 = self._ln(tower, 1, relu(self._dgcn(tower, 1, H0, tp)))
        H2 = self._ln(tower, 2, relu(self._dgcn(tower, 2, H1, tp)) + H1)
        return self._ln(tower, 3, self._dgcn(tower, 3, H2, tp))

    def apply_head(self, H3: Tensor) -> HeadOutput:
        P = self.params
        if self.head == "mae":
            return HeadOutput("mae", mean=H3)

        def lin(name):
            return H3 @ P[f"head.{name}.w"] + P[f"head.{name}.b"]

        if self.head == "gnll":
            return HeadOutput("gnll", mean=lin("mean"), var=softplus(lin("var")) + EPS_VAR)
        n = softplus(lin("n")) + EPS_N
        p = clip(sigmoid(lin("p")), P_CLAMP, 1.0 - P_CLAMP)
        if self.head == "nb":
            return HeadOutput("nb", n=n, p=p)
        pi = clip(sigmoid(lin("pi")), PI_CLAMP, 1.0 - PI_CLAMP)
        return HeadOutput("zinb", n=n, p=p, pi=pi)

    def forward(self, H0, transitions: Sequence[TransitionPair] | TransitionPair) -> HeadOutput:
        if isinstance(transitions, TransitionPair):
            transitions = [transitions]
        if len(transitions) != self.towers:
            raise DimensionError(f"model has {self.towers} tower(s) but got {len(transitions)} adjacency pair(s)")
        n = as_tensor(H0).shape[0]
        for tp in transitions:
            if tp.Wf.shape != (n, n):
                raise DimensionError("adjacency node sets differ from the input node count")
        H3s = [self.tower_forward(H0, tp, s) for s, tp in enumerate(transitions)]
        H3 = H3s[0] if len(H3s) == 1 else concat(H3s, axis=1)
        return self.apply_head(H3)

    __call__ = forward
