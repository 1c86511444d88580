import argparse
import csv
import json

import pytest
import yaml

from streetkrig.checkpoint import load_checkpoint
from streetkrig.cli import build_parser, main, parse_coverage

SMALL = ["--h", "4", "--z", "8", "--epochs", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--nodes", 20, "--steps", 40, "--k-raw", 3, "--seed", 7, "--run-dir", d) == 0
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert run("train", "--data", data_dir, *SMALL, "--run-dir", out) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestHelp:
    def test_every_flag_shows_default(self):
        parser = build_parser()
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        assert set(subs.choices) == {"synth", "build-graph", "train", "eval", "ablate", "attribute"}
        for name, sp in subs.choices.items():
            for action in sp._actions:
                if action.dest == "help":
                    continue
                assert "default" in action.help or "required" in action.help, (name, action.dest)

    @pytest.mark.parametrize("cmd", ["synth", "build-graph", "train", "eval", "ablate", "attribute"])
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            run(cmd, "--help")
        assert exc.value.code == 0
        assert "default" in capsys.readouterr().out

    def test_unknown_flag_is_validation_error(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--bogus")
        assert exc.value.code == 1


class TestSynth:
    def test_files_and_manifest(self, data_dir):
        names = sorted(p.name for p in data_dir.iterdir())
        assert names == ["distances.csv", "edges.csv", "features.csv", "manifest.json", "targets.csv"]
        m = json.loads((data_dir / "manifest.json").read_text())
        assert m["command"] == "synth" and m["seed"] == 7 and set(m["artifacts"]) == set(names) - {"manifest.json"}

    def test_same_flags_same_digests(self, tmp_path):
        for name in ("a", "b"):
            run("synth", "--nodes", 9, "--steps", 12, "--seed", 3, "--run-dir", tmp_path / name)
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["artifacts"] == mb["artifacts"]

    def test_bad_zero_inflation(self, tmp_path):
        assert run("synth", "--zero-inflation", 1.1, "--run-dir", tmp_path / "x") == 1

    def test_auto_named_run_dir(self, tmp_path):
        assert run("synth", "--nodes", 4, "--steps", 4, "--seed", 5, "--out", tmp_path) == 0
        (d,) = tmp_path.iterdir()
        assert d.name.startswith("synth-") and d.name.endswith("-seed5")

    def test_non_empty_run_dir(self, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        assert run("synth", "--nodes", 4, "--steps", 4, "--run-dir", tmp_path) == 2


class TestBuildGraph:
    def test_connectivity(self, data_dir, tmp_path):
        assert run("build-graph", "--data", data_dir, "--kind", "distance", "--connectivity", "--run-dir", tmp_path / "g") == 0
        rows = read_rows(tmp_path / "g" / "connectivity.csv")
        assert len(rows) == 20 and set(rows[0]) == {"node_id", "degree", "betweenness", "closeness", "clustering"}

    def test_missing_edges(self, tmp_path):
        (tmp_path / "targets.csv").write_text("node_id,time,value\na,1,1\n")
        assert run("build-graph", "--data", tmp_path, "--run-dir", tmp_path / "g") == 2


class TestTrain:
    def test_full_model_checkpoint(self, trained):
        ckpt = load_checkpoint(trained / "checkpoint.json")
        assert ckpt.cfg.loss == "zinb" and ckpt.model.head == "zinb"
        assert {"config.yaml", "split.json", "checkpoint.json", "report.json", "manifest.json"} <= {p.name for p in trained.iterdir()}

    def test_baseline_flags(self, data_dir, tmp_path):
        flags = ["--no-entire-graph", "--no-features", "--no-masked-only-loss", "--no-indicators", "--loss", "mse"]
        assert run("train", "--data", data_dir, *SMALL, *flags, "--run-dir", tmp_path / "t") == 0
        cfg = load_checkpoint(tmp_path / "t" / "checkpoint.json").cfg
        assert (cfg.entire_graph, cfg.features, cfg.loss_scope, cfg.indicators, cfg.loss) == (
            False, False, "all_valid", False, "mse"
        )

    def test_head_loss_mismatch(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--loss", "zinb", "--head", "mae", "--run-dir", tmp_path / "t") == 1

    def test_indicators_without_features(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--no-features", "--indicators", "--run-dir", tmp_path / "t") == 1

    def test_config_file_then_flags(self, data_dir, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"loss": "nb", "epochs": 1, "h": 4, "z": 4, "schedule": {"patience": 2}}))
        assert run("train", "--data", data_dir, "--config", cfg, "--z", 6, "--run-dir", tmp_path / "t") == 0
        c = load_checkpoint(tmp_path / "t" / "checkpoint.json").cfg
        assert (c.loss, c.epochs, c.z, c.lr_patience) == ("nb", 1, 6, 2)

    def test_dual_adjacency(self, data_dir, tmp_path):
        args = ["--adjacency", "dual:binary+distance", "--loss", "nb"]
        assert run("train", "--data", data_dir, *SMALL, *args, "--run-dir", tmp_path / "t") == 0
        assert load_checkpoint(tmp_path / "t" / "checkpoint.json").model.towers == 2

    def test_bitwise_identical_reruns(self, data_dir, trained, tmp_path):
        assert run("train", "--data", data_dir, *SMALL, "--run-dir", tmp_path / "again") == 0
        for name in ("checkpoint.json", "report.json", "config.yaml", "split.json"):
            assert (trained / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


class TestEval:
    def test_metrics_and_reload(self, data_dir, trained, tmp_path):
        assert run("eval", "--data", data_dir, "--checkpoint", trained / "checkpoint.json", "--run-dir", tmp_path / "e") == 0
        m = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert all(m[k] == m[k] and m[k] is not None for k in ("mae", "rmse", "kl", "nll"))
        assert abs(m["recomputed_val_loss"] - m["recorded_best_val_loss"]) <= 1e-10
        (row,) = read_rows(tmp_path / "e" / "metrics.csv")
        assert row["head"] == "zinb" and row["coverage"] == "0.9"

    def test_tau_override(self, data_dir, trained, tmp_path):
        run("eval", "--data", data_dir, "--checkpoint", trained / "checkpoint.json", "--tau", 0.5, "--run-dir", tmp_path / "e")
        assert json.loads((tmp_path / "e" / "metrics.json").read_text())["tau"] == 0.5

    def test_missing_checkpoint(self, data_dir, tmp_path):
        assert run("eval", "--data", data_dir, "--checkpoint", tmp_path / "none.json", "--run-dir", tmp_path / "e") == 2

    def test_schema_mismatch(self, trained, tmp_path):
        other = tmp_path / "other"
        run("synth", "--nodes", 20, "--steps", 40, "--k-raw", 5, "--run-dir", other)
        assert run("eval", "--data", other, "--checkpoint", trained / "checkpoint.json", "--run-dir", tmp_path / "e") == 2


class TestAblate:
    def test_grid_rows(self, data_dir, tmp_path):
        v = tmp_path / "v.yaml"
        v.write_text(yaml.safe_dump([{"name": "base", "loss": "mse", "features": False, "indicators": False},
                                     {"name": "full"}]))
        assert run("ablate", "--data", data_dir, "--variants", v, "--seeds", "0,1", *SMALL, "--run-dir", tmp_path / "a") == 0
        rows = read_rows(tmp_path / "a" / "grid.csv")
        assert [(r["variant"], r["seed"]) for r in rows] == [
            ("base", "0"), ("base", "1"), ("base", "mean"), ("full", "0"), ("full", "1"), ("full", "mean")
        ]
        assert all(r["error"] == "" for r in rows)

    def test_empty_variant_file(self, data_dir, tmp_path):
        v = tmp_path / "v.yaml"
        v.write_text("")
        assert run("ablate", "--data", data_dir, "--variants", v, "--run-dir", tmp_path / "a") == 0
        assert (tmp_path / "a" / "grid.csv").read_text().startswith("variant,head,adjacency,coverage")
        assert read_rows(tmp_path / "a" / "grid.csv") == []

    def test_failure_recorded_run_continues(self, data_dir, tmp_path):
        v = tmp_path / "v.yaml"
        v.write_text(yaml.safe_dump([{"name": "bad", "features": False, "indicators": True}, {"name": "ok"}]))
        assert run("ablate", "--data", data_dir, "--variants", v, *SMALL, "--run-dir", tmp_path / "a") == 0
        rows = read_rows(tmp_path / "a" / "grid.csv")
        assert rows[0]["variant"] == "bad" and "indicator" in rows[0]["error"]
        assert rows[-1]["variant"] == "ok" and rows[-1]["error"] == ""

    def test_coverage_sweep(self, data_dir, tmp_path):
        v = tmp_path / "v.yaml"
        v.write_text(yaml.safe_dump([{"name": "full"}]))
        args = ["--coverage", "0.5,0.9", *SMALL, "--run-dir", tmp_path / "a"]
        assert run("ablate", "--data", data_dir, "--variants", v, *args) == 0
        rows = [r for r in read_rows(tmp_path / "a" / "grid.csv") if r["seed"] != "mean"]
        assert [r["coverage"] for r in rows] == ["0.5", "0.9"]

    def test_parse_coverage(self):
        assert parse_coverage("0.01..0.9") == [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9]
        assert parse_coverage("0.05,0.2") == [0.05, 0.2]


class TestAttribute:
    def test_default_steps_and_groups(self, data_dir, trained, tmp_path):
        g = tmp_path / "groups.csv"
        g.write_text("channel_name,group_name\nstreet_class,static\nlanduse,static\n")
        args = ["--checkpoint", trained / "checkpoint.json", "--windows", 1, "--groups", g, "--run-dir", tmp_path / "x"]
        assert run("attribute", "--data", data_dir, *args) == 0
        m = json.loads((tmp_path / "x" / "manifest.json").read_text())
        assert m["config"]["steps"] == 50
        rep = json.loads((tmp_path / "x" / "attribution.json").read_text())
        static = next(r for r in rep["groups"] if r["group"] == "static")
        assert static["members"] == ["street_class", "landuse"]

    def test_conflicting_groups(self, data_dir, trained, tmp_path):
        g = tmp_path / "groups.csv"
        g.write_text("landuse,a\nlanduse,b\n")
        args = ["--checkpoint", trained / "checkpoint.json", "--groups", g, "--run-dir", tmp_path / "x"]
        assert run("attribute", "--data", data_dir, *args) == 1
