"""Training configuration with validation and YAML round-tripping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LOSS_KINDS
from .model import LOSS_TO_HEAD

ADJACENCY_KINDS = ("binary", "distance", "similarity")
LOSS_SCOPES = ("masked_only", "all_valid")


def parse_adjacency(value: str) -> list[str]:
    """``"binary"`` -> ``["binary"]``; ``"dual:binary+distance"`` -> two kinds."""
    if value.startswith("dual:"):
        kinds = value[5:].split("+")
        if len(kinds) != 2:
            raise ConfigError(f"dual adjacency needs two kinds joined by '+', got {value!r}")
    else:
        kinds = [value]
    for k in kinds:
        if k not in ADJACENCY_KINDS:
            raise ConfigError(f"unknown adjacency {k!r}; expected one of {ADJACENCY_KINDS}")
    return kinds


@dataclass
class TrainConfig:
    """All knobs of one training run.

    The four boolean flags and ``loss`` are the ablation axes: entire-graph
    training, node features, masked-only loss (``loss_scope``), indicator
    channels, and the loss kind.  ``head`` may be left ``None`` to follow the
    loss; if given it must match.
    """

    loss: str = "zinb"
    head: str | None = None
    loss_scope: str = "masked_only"
    entire_graph: bool = True
    features: bool = True
    indicators: bool = True
    adjacency: str = "binary"
    epochs: int = 50
    batch_size: int = 1
    h: int = 8
    z: int = 100
    K: int = 2
    mask_ratio: float = 0.25
    sample_fraction: float = 1.0
    learning_rate: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-5
    max_reductions: int = 3
    ln_eps: float = 1e-5
    coverage: float = 0.9
    temporal_mode: str = "within"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def head_kind(self) -> str:
        return LOSS_TO_HEAD[self.loss]

    @property
    def adjacency_kinds(self) -> list[str]:
        return parse_adjacency(self.adjacency)

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.head is not None and self.head != self.head_kind:
            raise ConfigError(f"loss {self.loss!r} requires the {self.head_kind!r} head, not {self.head!r}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"unknown loss scope {self.loss_scope!r}")
        if self.indicators and not self.features:
            raise ConfigError("indicator channels require node features to be enabled")
        kinds = parse_adjacency(self.adjacency)
        if len(kinds) == 2 and self.head_kind == "mae":
            raise ConfigError("dual adjacency needs a head with output maps (gnll, nb or zinb)")
        for name in ("epochs", "lr_patience", "max_reductions"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "h", "z", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if not (self.learning_rate > 0 and self.min_lr > 0 and 0 < self.lr_factor < 1):
            raise ConfigError("learning rates must be positive and lr_factor in (0, 1)")
        if not 0.0 < self.coverage <= 0.9:
            raise ConfigError("coverage must lie in (0, 0.9]")
        if self.temporal_mode not in ("within", "future"):
            raise ConfigError(f"unknown temporal mode {self.temporal_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head_kind
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **overrides) -> "TrainConfig":
        d = asdict(self)
        d.update(overrides)
        return TrainConfig.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        # accept a nested "schedule:" block as well as flat keys
        sched = data.pop("schedule", None) or {}
        for key, target in (("factor", "lr_factor"), ("patience", "lr_patience"), ("min_lr", "min_lr")):
            if key in sched:
                data[target] = sched[key]
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
