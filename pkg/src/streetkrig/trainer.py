"""Epoch loop over masked samples with Adam, reduce-on-plateau and
validation-based model selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, fresh_tape
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .dataio import Panel, SplitPlan
from .errors import ConfigError
from .graph import Graph, transitions
from .losses import loss_weights
from .model import build_h0
from .pipeline import Experiment, build_model, head_loss, interpolate_part, prepare
from .sampler import draw_sample, sample_sizes, schedule

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-5
    best: float = math.inf
    bad_epochs: int = 0
    reductions_since_best: int = 0


def lr_step(state: PlateauState, val_loss: float) -> float:
    """Reduce-on-plateau: scale the rate by ``factor`` after ``patience`` epochs without improvement."""
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
        state.reductions_since_best = 0
        return state.lr
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.lr = max(state.min_lr, state.lr * state.factor)
        state.bad_epochs = 0
        state.reductions_since_best += 1
    return state.lr


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float | None = None
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    stopped_early: bool = False
    diverged: bool = False
    divergence: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _val_metrics(model, exp: Experiment, loss_kind: str) -> tuple[float, float]:
    res = interpolate_part(model, exp, "val")
    w = res.N
    if w.sum() == 0:
        return math.inf, math.inf
    mae = float(np.sum(w * np.abs(res.pred - res.T)) / w.sum())
    return res.loss(loss_kind), mae


def _sample_loss(model, exp: Experiment, cfg: TrainConfig, start: int, rng, n_o: int, n_m: int, extra):
    window = (start, start + cfg.h)
    s = draw_sample(
        exp.X, exp.T, exp.N, exp.graphs[0].W, window, n_o, n_m, rng, exp.train_idx, extra, cfg.indicators
    )
    t0, t1 = window
    T_scaled = exp.T_scaled[s.node_idx, t0:t1]
    H0 = build_h0(s.X_s, T_scaled * s.M_s * s.N_s)
    tps = [s.transition_pair] + [transitions(g.W[np.ix_(s.node_idx, s.node_idx)]) for g in exp.graphs[1:]]
    w = loss_weights(s.M_s, s.N_s, cfg.loss_scope)
    if w.sum() == 0:
        return None
    out = model.forward(H0, tps)
    return head_loss(out, cfg.loss, s.T_s, T_scaled, w)


def train_experiment(exp: Experiment, checkpoint_path=None, model=None) -> tuple[TrainReport, Checkpoint]:
    cfg = exp.cfg
    t_start = time.perf_counter()
    model = model or build_model(exp)
    opt = Adam(model.params, lr=cfg.learning_rate)
    plateau = PlateauState(cfg.learning_rate, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)
    report = TrainReport()
    best_state = model.state_dict()

    train_times = exp.times("train")
    offset, P_train = int(train_times[0]), int(train_times.size)
    n_o, n_m = sample_sizes(exp.train_idx.size, cfg.mask_ratio, cfg.sample_fraction)
    train_set = set(exp.train_idx.tolist())
    extra = [i for i in range(exp.panel.n) if i not in train_set] if cfg.entire_graph else []

    for epoch in range(cfg.epochs):
        sched = schedule(P_train, cfg.h, cfg.batch_size, shuffle_seed=[cfg.seed, epoch], offset=offset)
        epoch_losses = []
        for batch in sched.batches():
            model.zero_grad()
            with fresh_tape():
                losses = []
                for start in batch:
                    rng = np.random.default_rng([cfg.seed, epoch, start])
                    loss = _sample_loss(model, exp, cfg, start, rng, n_o, n_m, extra)
                    if loss is not None:
                        losses.append(loss)
                if not losses:
                    continue
                total = losses[0]
                for extra_loss in losses[1:]:
                    total = total + extra_loss
                total = total * (1.0 / len(losses))
                value = float(total.data)
                if not math.isfinite(value):
                    report.diverged = True
                    report.divergence = f"non-finite training loss {value} at epoch {epoch}"
                    break
                total.backward()
            opt.step()
            epoch_losses.append(value)
        if report.diverged:
            break
        report.train_loss.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        val_loss, val_mae = _val_metrics(model, exp, cfg.loss)
        if not math.isfinite(val_loss):
            report.diverged = True
            report.divergence = f"non-finite validation loss {val_loss} at epoch {epoch}"
            break
        report.val_loss.append(val_loss)
        report.val_mae.append(val_mae)
        report.lr.append(opt.lr)
        if report.best_val_loss is None or val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state_dict()
        opt.lr = lr_step(plateau, val_loss)
        log.debug("epoch %d train %.5g val %.5g lr %.2g", epoch, report.train_loss[-1], val_loss, opt.lr)
        if plateau.reductions_since_best >= cfg.max_reductions:
            report.stopped_early = True
            break

    if report.diverged:
        log.warning("training aborted: %s; keeping the best checkpoint so far", report.divergence)
    model.load_state_dict(best_state)
    ckpt = Checkpoint(
        cfg=cfg,
        model=model,
        record=exp.record,
        split=exp.split,
        node_ids=list(exp.panel.node_ids),
        feature_names=list(exp.panel.feature_names) if cfg.features else [],
        best_epoch=report.best_epoch,
        best_val_loss=report.best_val_loss,
    )
    report.wall_clock = time.perf_counter() - t_start
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report, ckpt


def train(panel: Panel, graphs, split: SplitPlan, cfg: TrainConfig, checkpoint_path=None):
    """Train one model; returns ``(TrainReport, Checkpoint)`` holding the best-by-validation weights."""
    cfg.validate()
    exp = prepare(panel, resolve_graphs(graphs, cfg), split, cfg)
    return train_experiment(exp, checkpoint_path)


def resolve_graphs(graphs, cfg: TrainConfig) -> list[Graph]:
    """Pick the adjacency graphs named by ``cfg.adjacency``.

    ``graphs`` may be a single graph (used as-is), a list (used as-is) or a
    mapping from adjacency kind to graph.
    """
    if isinstance(graphs, Graph):
        return [graphs]
    if isinstance(graphs, dict):
        missing = [k for k in cfg.adjacency_kinds if k not in graphs]
        if missing:
            raise ConfigError(f"no graph supplied for adjacency kind(s) {missing}")
        return [graphs[k] for k in cfg.adjacency_kinds]
    return list(graphs)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

# Cumulative component rows, from a plain masked-MSE baseline to the full model.
BASELINE = dict(entire_graph=False, features=False, loss_scope="all_valid", indicators=False, loss="mse")
ABLATION_VARIANTS = [
    ("baseline_mse", dict(BASELINE)),
    ("entire_graph", dict(BASELINE, entire_graph=True)),
    ("features", dict(BASELINE, entire_graph=True, features=True)),
    ("masked_only", dict(BASELINE, entire_graph=True, features=True, loss_scope="masked_only")),
    ("indicators_mse", dict(BASELINE, entire_graph=True, features=True, loss_scope="masked_only", indicators=True)),
    ("full_mae", dict(entire_graph=True, features=True, loss_scope="masked_only", indicators=True, loss="mae")),
    ("full_gnll", dict(entire_graph=True, features=True, loss_scope="masked_only", indicators=True, loss="gnll")),
    ("full_nb", dict(entire_graph=True, features=True, loss_scope="masked_only", indicators=True, loss="nb")),
    ("full_zinb", dict(entire_graph=True, features=True, loss_scope="masked_only", indicators=True, loss="zinb")),
]


def ablation_run(
    panel: Panel,
    graphs,
    split: SplitPlan,
    variants,
    base: TrainConfig | None = None,
    seeds=None,
    tau: float = 0.99,
) -> list[dict]:
    """Train and test every variant with a shared split; one metrics row per (variant, seed).

    ``variants`` is a list of ``(name, overrides)`` pairs applied on top of
    ``base``.  Invalid variants raise ConfigError before any training starts.
    """
    from .metrics import evaluate
    from .metrics import interpolate as metric_interpolate

    base = base or TrainConfig()
    seeds = [base.seed] if seeds is None else list(seeds)
    configs = []
    for name, overrides in variants:
        configs.append((name, base.replace(**overrides)))
    rows = []
    for name, cfg in configs:
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            report, ckpt = train(panel, graphs, split, run_cfg)
            g = resolve_graphs(graphs, run_cfg)
            metrics = evaluate(metric_interpolate(ckpt, panel, g, split), tau=tau)
            row = metrics.csv_row(name, run_cfg.adjacency, split.coverage_fraction, seed)
            row["best_epoch"] = report.best_epoch
            rows.append(row)
    return rows
