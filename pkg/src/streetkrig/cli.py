"""Command-line interface: synth | build-graph | train | eval | ablate | attribute.

Exit codes: 0 on success, 1 on a validation error (bad flags, inconsistent
configuration), 2 on a runtime error (I/O, malformed data, divergence).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attribution import attribute_checkpoint, read_grouping, write_report
from .checkpoint import check_compatible, load_checkpoint
from .config import TrainConfig
from .dataio import load_panel, make_split, synth_generate, write_panel
from .errors import ConfigError, ParameterError, SplitError, StreetKrigError
from .graph import (
    build_distance,
    build_similarity,
    connectivity,
    load_graph,
    read_node_matrix,
    write_edge_list,
)
from .model import LOSS_TO_HEAD
from .metrics import CSV_COLUMNS, evaluate, interpolate, rows_to_csv
from .pipeline import interpolate_part, prepare
from .trainer import ablation_run, resolve_graphs, train

log = logging.getLogger("streetkrig")

VALIDATION_ERRORS = (ConfigError, ParameterError, SplitError)
COVERAGE_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directories and manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def make_run_dir(args, command: str, seed) -> Path:
    if getattr(args, "run_dir", None):
        out = Path(args.run_dir)
        if out.exists() and any(out.iterdir()):
            raise FileExistsError(f"run directory {out} is not empty; refusing to overwrite")
        out.mkdir(parents=True, exist_ok=True)
        return out
    base = Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = f"{command}-{stamp}-seed{seed}"
    out = base / name
    i = 1
    while out.exists():
        out = base / f"{name}-{i}"
        i += 1
    out.mkdir(parents=True)
    return out


def write_manifest(out: Path, command: str, config: dict, inputs: list, seed) -> None:
    artifacts = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs if p is not None and Path(p).exists()},
        "artifacts": {p.name: sha256_file(p) for p in artifacts},
        "tool_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# shared inputs
# ---------------------------------------------------------------------------


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="directory with features.csv, targets.csv, edges.csv, distances.csv (default: none)")
    g.add_argument("--features-file", help="features CSV (default: <data>/features.csv if present)")
    g.add_argument("--targets-file", help="targets CSV (default: <data>/targets.csv)")
    g.add_argument("--edges-file", help="edge list for the binary adjacency (default: <data>/edges.csv)")
    g.add_argument("--distances-file", help="node distance matrix CSV (default: <data>/distances.csv)")
    g.add_argument(
        "--infra-file", help="node infrastructure features for similarity (default: <data>/infra.csv, else time-mean features)"
    )
    g.add_argument("--sigma", type=float, default=None, help="distance kernel width (default: std of distances)")


def _resolve(args, attr, name):
    val = getattr(args, attr, None)
    if val:
        return Path(val)
    if args.data:
        p = Path(args.data) / name
        return p
    return None


def load_inputs(args, kinds):
    targets = _resolve(args, "targets_file", "targets.csv")
    if targets is None or not targets.exists():
        raise FileNotFoundError(f"targets file not found: {targets}")
    features = _resolve(args, "features_file", "features.csv")
    panel = load_panel(features, targets)
    nodes = [str(n) for n in panel.node_ids]
    graphs = {}
    used = [targets, features]
    for kind in dict.fromkeys(kinds):
        if kind == "binary":
            path = _resolve(args, "edges_file", "edges.csv")
            if path is None or not path.exists():
                raise FileNotFoundError(f"edge list not found: {path}")
            graphs[kind] = load_graph(path, nodes, "binary")
        elif kind == "distance":
            path = _resolve(args, "distances_file", "distances.csv")
            if path is None or not path.exists():
                raise FileNotFoundError(f"distance matrix not found: {path}")
            _, D = read_node_matrix(path, nodes, square=True)
            graphs[kind] = build_distance(D, args.sigma, nodes)
        elif kind == "similarity":
            path = _resolve(args, "infra_file", "infra.csv")
            if path is not None and path.exists():
                _, F = read_node_matrix(path, nodes)
            else:
                if panel.k_raw == 0:
                    raise ConfigError("similarity adjacency needs an infrastructure file or node features")
                F = panel.X_raw.mean(axis=1)
            graphs[kind] = build_similarity(F, nodes)
        used.append(path)
    return panel, graphs, used


# ---------------------------------------------------------------------------
# configuration flags
# ---------------------------------------------------------------------------

_FLAG_TYPES = {int: int, float: float, str: str}


def _add_config_args(p, exclude=()):
    g = p.add_argument_group("training configuration (flags override --config)")
    g.add_argument("--config", help="YAML config file (default: none, built-in defaults)")
    defaults = TrainConfig()
    g.add_argument(
        "--entire-graph", action=argparse.BooleanOptionalAction, default=None,
        help=f"include unseen nodes' features in training graphs (default: {defaults.entire_graph})",
    )
    g.add_argument(
        "--features", action=argparse.BooleanOptionalAction, default=None,
        help=f"use node feature channels (default: {defaults.features})",
    )
    g.add_argument(
        "--masked-only-loss", action=argparse.BooleanOptionalAction, default=None,
        help="compute the loss on masked nodes only; --no-masked-only-loss uses all valid entries (default: True)",
    )
    g.add_argument(
        "--indicators", action=argparse.BooleanOptionalAction, default=None,
        help=f"append mask/missing indicator channels (default: {defaults.indicators})",
    )
    g.add_argument("--loss", choices=["mae", "mse", "gnll", "nb", "zinb"], default=None,
                   help=f"training loss (default: {defaults.loss})")
    g.add_argument("--head", choices=["mae", "gnll", "nb", "zinb"], default=None,
                   help="output head; must agree with --loss (default: derived from the loss)")
    g.add_argument("--adjacency", default=None,
                   help=f"binary | distance | similarity | dual:<a>+<b> (default: {defaults.adjacency})")
    skip = {"loss", "head", "adjacency", "entire_graph", "features", "indicators", "loss_scope", *exclude}
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, type=_FLAG_TYPES[type(getattr(defaults, f.name))], default=None,
                       help=f"(default: {getattr(defaults, f.name)})")


def resolve_config(args) -> TrainConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    base = asdict(TrainConfig.load(args.config)) if args.config else asdict(TrainConfig())
    overrides = {}
    for f in fields(TrainConfig):
        val = getattr(args, f.name, None) if f.name != "loss_scope" else None
        if val is not None:
            overrides[f.name] = val
    if getattr(args, "masked_only_loss", None) is not None:
        overrides["loss_scope"] = "masked_only" if args.masked_only_loss else "all_valid"
    if "loss" in overrides and "head" not in overrides and base["head"] == LOSS_TO_HEAD[base["loss"]]:
        base["head"] = None  # a head that merely echoed the old loss follows the new one
    base.update(overrides)
    return TrainConfig.from_dict(base)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _grid_distances(n: int) -> np.ndarray:
    rows = int(math.floor(math.sqrt(n)))
    cols = int(math.ceil(n / rows))
    pos = np.array([(i // cols, i % cols) for i in range(n)], dtype=float)
    return np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2))


def cmd_synth(args) -> int:
    if not 0.0 <= args.zero_inflation < 1.0:
        raise UsageError(f"--zero-inflation must lie in [0, 1), got {args.zero_inflation}")
    if not 0.0 <= args.missing_rate < 1.0:
        raise UsageError(f"--missing-rate must lie in [0, 1), got {args.missing_rate}")
    panel, graph = synth_generate(
        args.nodes, args.steps, k_raw=args.k_raw, zero_inflation=args.zero_inflation, seed=args.seed,
        missing_rate=args.missing_rate, dispersion=args.dispersion, mean_count=args.mean_count,
    )
    out = make_run_dir(args, "synth", args.seed)
    write_panel(panel, out / "features.csv", out / "targets.csv")
    write_edge_list(graph, out / "edges.csv")
    D = _grid_distances(panel.n)
    with open(out / "distances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id"] + list(panel.node_ids))
        for nid, row in zip(panel.node_ids, D):
            w.writerow([nid] + [repr(float(v)) for v in row])
    config = {k: getattr(args, k) for k in ("nodes", "steps", "k_raw", "zero_inflation", "missing_rate",
                                             "dispersion", "mean_count", "seed")}
    write_manifest(out, "synth", config, [], args.seed)
    print(out)
    return 0


def cmd_build_graph(args) -> int:
    panel, graphs, used = load_inputs(args, [args.kind])
    g = graphs[args.kind]
    out = make_run_dir(args, "build-graph", 0)
    write_edge_list(g, out / f"graph_{args.kind}.csv")
    if args.connectivity:
        c = connectivity(g)
        with open(out / "connectivity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id"] + list(c))
            for i, nid in enumerate(g.node_ids):
                w.writerow([nid] + [repr(float(c[k][i])) for k in c])
    write_manifest(out, "build-graph", {"kind": args.kind, "sigma": args.sigma}, used, None)
    print(out)
    return 0


def _split_for(args, cfg, panel):
    return make_split(panel.node_ids, cfg.coverage, cfg.temporal_mode, seed=args.split_seed, P=panel.P)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    panel, graphs, used = load_inputs(args, cfg.adjacency_kinds)
    split = _split_for(args, cfg, panel)
    out = make_run_dir(args, "train", cfg.seed)
    cfg.dump(out / "config.yaml")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    report, _ = train(panel, graphs, split, cfg, checkpoint_path=out / "checkpoint.json")
    d = report.to_dict()
    d.pop("wall_clock")
    d["checkpoint_path"] = "checkpoint.json"  # relative to the run directory
    (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True))
    resolved = cfg.to_dict() | {"split_seed": args.split_seed}
    write_manifest(out, "train", resolved, used + ([Path(args.config)] if args.config else []), cfg.seed)
    print(out)
    if report.diverged:
        log.error("training diverged: %s", report.divergence)
        return 2
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    panel, graph_map, used = load_inputs(args, ckpt.cfg.adjacency_kinds)
    graphs = resolve_graphs(graph_map, ckpt.cfg)
    check_compatible(ckpt, panel, graphs)
    bundle = interpolate(ckpt, panel, graphs, part=args.part)
    report = evaluate(bundle, tau=args.tau, bins=args.bins, eps=args.kl_eps)
    exp = prepare(panel, graphs, ckpt.split, ckpt.cfg, record=ckpt.record)
    val_loss = interpolate_part(ckpt.model, exp, "val").loss(ckpt.cfg.loss)
    out = make_run_dir(args, "eval", ckpt.cfg.seed)
    payload = report.to_dict() | {
        "part": args.part,
        "recorded_best_val_loss": ckpt.best_val_loss,
        "recomputed_val_loss": val_loss,
    }
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    row = report.csv_row(args.variant, ckpt.cfg.adjacency, ckpt.split.coverage_fraction, ckpt.cfg.seed)
    rows_to_csv([row], out / "metrics.csv")
    write_manifest(out, "eval", {"tau": args.tau, "bins": args.bins, "kl_eps": args.kl_eps, "part": args.part},
                   used + [Path(args.checkpoint)], ckpt.cfg.seed)
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(out)
    return 0


def parse_coverage(text: str) -> list[float]:
    """``"0.05,0.2,0.9"`` or a range ``"0.01..0.9"`` over the standard coverage grid."""
    if ".." in text:
        lo, hi = (float(v) for v in text.split(".."))
        vals = [c for c in COVERAGE_GRID if lo - 1e-12 <= c <= hi + 1e-12]
    else:
        vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError(f"no coverage values in {text!r}")
    return vals


def read_variants(path) -> list[tuple[str, dict]]:
    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else []
    if data is None:
        data = []
    if isinstance(data, dict):
        data = [dict(v, name=k) for k, v in data.items()]
    variants = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ConfigError(f"{path}: variant {i} is not a mapping")
        item = dict(item)
        name = str(item.pop("name", f"variant_{i}"))
        variants.append((name, item))
    return variants


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    variants = read_variants(args.variants)
    coverages = parse_coverage(args.coverage_sweep) if args.coverage_sweep else [base.coverage]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    kinds = set(base.adjacency_kinds)
    for _, ov in variants:
        if "adjacency" in ov:
            kinds.update(base.replace(**ov).adjacency_kinds)
    panel, graphs, used = load_inputs(args, sorted(kinds)) if variants else (None, None, [])
    out = make_run_dir(args, "ablate", base.seed)
    columns = CSV_COLUMNS + ["error"]
    rows = []
    for name, ov in variants:
        for cov in coverages:
            per_seed = []
            for seed in seeds:
                try:
                    split = make_split(panel.node_ids, cov, base.replace(**ov).temporal_mode, seed=args.split_seed, P=panel.P)
                    row = ablation_run(panel, graphs, split, [(name, ov)], base=base, seeds=[seed])[0]
                    row["error"] = ""
                    per_seed.append(row)
                except (StreetKrigError, ValueError) as exc:
                    log.error("variant %s seed %s failed: %s", name, seed, exc)
                    row = {c: "" for c in columns} | {"variant": name, "coverage": cov, "seed": seed, "error": str(exc)}
                rows.append(row)
            if per_seed:
                agg = {"variant": name, "head": per_seed[0]["head"], "adjacency": per_seed[0]["adjacency"],
                       "coverage": cov, "seed": "mean", "error": ""}
                for key in ("mae", "rmse", "kl", "zero", "nll", "n_entries"):
                    vals = [r[key] for r in per_seed if r[key] != ""]
                    agg[key] = float(np.mean(vals)) if vals else ""
                rows.append(agg)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    write_manifest(out, "ablate", base.to_dict() | {"coverages": coverages, "seeds": seeds},
                   used + [Path(args.variants)], base.seed)
    print(out)
    return 0


def cmd_attribute(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    panel, graph_map, used = load_inputs(args, ckpt.cfg.adjacency_kinds)
    graphs = resolve_graphs(graph_map, ckpt.cfg)
    check_compatible(ckpt, panel, graphs)
    grouping = read_grouping(args.groups) if args.groups else None
    exp = prepare(panel, graphs, ckpt.split, ckpt.cfg, record=ckpt.record)
    report, gap = attribute_checkpoint(ckpt, exp, windows=args.windows, steps=args.steps, grouping=grouping)
    out = make_run_dir(args, "attribute", ckpt.cfg.seed)
    write_report(report, out)
    inputs = used + [Path(args.checkpoint)] + ([Path(args.groups)] if args.groups else [])
    write_manifest(out, "attribute", {"steps": args.steps, "windows": args.windows, "completeness_gap": gap},
                   inputs, ckpt.cfg.seed)
    print(report.to_csv(), end="")
    print(f"mean completeness gap: {gap:.3e}")
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_out_args(p):
    p.add_argument("--out", default="runs", help="base directory for per-run output directories (default: runs)")
    p.add_argument("--run-dir", default=None, help="exact output directory; must be empty (default: auto-named)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streetkrig", description="Graph kriging of traffic counts on street networks.")
    parser.add_argument("--version", action="version", version=f"streetkrig {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic zero-inflated panel")
    p.add_argument("--nodes", type=int, default=64, help="number of street segments (default: %(default)s)")
    p.add_argument("--steps", type=int, default=400, help="number of time steps (default: %(default)s)")
    p.add_argument("--k-raw", type=int, default=4, help="raw feature channels (default: %(default)s)")
    p.add_argument("--zero-inflation", type=float, default=0.5, help="mean structural-zero probability (default: %(default)s)")
    p.add_argument("--missing-rate", type=float, default=0.01, help="share of missing observations (default: %(default)s)")
    p.add_argument("--dispersion", type=float, default=2.0, help="negative-binomial dispersion (default: %(default)s)")
    p.add_argument("--mean-count", type=float, default=12.0, help="mean intensity (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    _add_out_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="build an adjacency matrix from data files")
    p.add_argument("--kind", choices=["binary", "distance", "similarity"], default="binary", help="adjacency kind (default: %(default)s)")
    p.add_argument("--connectivity", action="store_true", help="also write betweenness/closeness/clustering (default: %(default)s)")
    _add_data_args(p)
    _add_out_args(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--split-seed", type=int, default=0, help="seed of the node split (shared across coverages) (default: %(default)s)")
    _add_out_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out nodes")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json written by train (required)")
    p.add_argument("--tau", type=float, default=0.99, help="true-zero threshold (default: %(default)s)")
    p.add_argument("--bins", type=int, default=50, help="KL histogram bins (default: %(default)s)")
    p.add_argument("--kl-eps", type=float, default=1e-9, help="KL additive smoothing per bin (default: %(default)s)")
    p.add_argument("--part", choices=["test", "val"], default="test", help="node set to evaluate (default: %(default)s)")
    p.add_argument("--variant", default="", help="variant label for the CSV row (default: %(default)s)")
    _add_data_args(p)
    _add_out_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a list of variants")
    p.add_argument("--variants", required=True, help="YAML list of {name, <config overrides>} (required)")
    p.add_argument("--seeds", default=None, help="comma-separated training seeds (default: --seed)")
    p.add_argument("--coverage", dest="coverage_sweep", default=None,
                   help="coverage list '0.05,0.9' or range '0.01..0.9' (default: config coverage)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the nested node split (default: %(default)s)")
    _add_data_args(p)
    _add_config_args(p, exclude=("coverage",))
    _add_out_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attribute", help="integrated-gradients feature importance")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json written by train (required)")
    p.add_argument("--steps", type=int, default=50, help="integration steps (default: %(default)s)")
    p.add_argument("--windows", type=int, default=4, help="number of test windows to attribute (default: %(default)s)")
    p.add_argument("--groups", default=None, help="channel_name,group_name mapping file (default: %(default)s)")
    _add_data_args(p)
    _add_out_args(p)
    p.set_defaults(func=cmd_attribute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StreetKrigError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
