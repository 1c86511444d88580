"""JSON checkpoints: configuration, scaling record, split and parameters."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .dataio import ScaleRecord, SplitPlan
from .errors import SchemaError
from .model import DGCN

SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    cfg: TrainConfig
    model: DGCN
    record: ScaleRecord
    split: SplitPlan
    node_ids: list
    feature_names: list
    best_epoch: int = -1
    best_val_loss: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.cfg.to_dict(),
            "model": self.model.config(),
            "scale": self.record.to_dict(),
            "split": self.split.to_dict(),
            "node_ids": [str(i) for i in self.node_ids],
            "feature_names": list(self.feature_names),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "extra": self.extra,
            "params": {
                name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                for name, arr in self.model.state_dict().items()
            },
        }


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    atomic_write_text(path, json.dumps(ckpt.to_dict(), indent=1, sort_keys=True))
    return Path(path)


def checkpoint_from_dict(d: dict) -> Checkpoint:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported checkpoint schema version {d.get('schema_version')!r}")
    cfg_d = dict(d["config"])
    cfg = TrainConfig.from_dict(cfg_d)
    mc = d["model"]
    model = DGCN(
        mc["in_channels"], mc["h"], z=mc["z"], K=mc["K"], head=mc["head"], towers=mc["towers"], ln_eps=mc["ln_eps"]
    )
    state = {}
    for name, entry in d["params"].items():
        state[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
    missing = sorted(set(model.params) - set(state))
    if missing:
        raise SchemaError(f"checkpoint is missing parameters {missing}")
    model.load_state_dict(state)
    return Checkpoint(
        cfg=cfg,
        model=model,
        record=ScaleRecord.from_dict(d["scale"]),
        split=SplitPlan.from_dict(d["split"]),
        node_ids=list(d["node_ids"]),
        feature_names=list(d["feature_names"]),
        best_epoch=int(d["best_epoch"]),
        best_val_loss=d["best_val_loss"],
        extra=d.get("extra", {}),
    )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a valid checkpoint ({exc})") from exc
    return checkpoint_from_dict(d)


def check_compatible(ckpt: Checkpoint, panel, graphs) -> None:
    """Raise SchemaError naming the mismatched dimension."""
    cfg = ckpt.cfg
    k_raw = panel.k_raw if cfg.features else 0
    expected = k_raw + (2 if cfg.indicators else 0)
    if cfg.features and panel.k_raw != len(ckpt.feature_names):
        raise SchemaError(
            f"feature channels: checkpoint has k_raw={len(ckpt.feature_names)}, panel has k_raw={panel.k_raw}"
        )
    if ckpt.model.in_channels != expected:
        raise SchemaError(f"input channels: checkpoint k={ckpt.model.in_channels}, data gives k={expected}")
    if [str(i) for i in panel.node_ids] != [str(i) for i in ckpt.node_ids]:
        raise SchemaError(f"node set: checkpoint has n={len(ckpt.node_ids)}, panel has n={panel.n} (or a different order)")
    for g in graphs:
        if g.W.shape[0] != len(ckpt.node_ids):
            raise SchemaError(f"graph size: checkpoint has n={len(ckpt.node_ids)}, graph has n={g.W.shape[0]}")
    if len(graphs) != ckpt.model.towers:
        raise SchemaError(f"adjacency count: checkpoint has {ckpt.model.towers} tower(s), got {len(graphs)} graph(s)")
