"""End-to-end acceptance checks, one test per criterion.

Each test records a short detail string; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import copy
import itertools
import json
import time

import numpy as np
import pytest

from streetkrig.attribution import completeness_gap, integrated_gradients, model_target
from streetkrig.autodiff import Tensor, fresh_tape, grad_check
from streetkrig.cli import main as cli_main
from streetkrig.config import TrainConfig
from streetkrig.dataio import make_split, synth_generate
from streetkrig.graph import build_binary, chebyshev_apply, connectivity, transitions
from streetkrig.losses import loss_nb, loss_weights, loss_zinb, nb_log_pmf, zinb_log_pmf
from streetkrig.metrics import (
    EvalBundle,
    evaluate,
    interpolate,
    kl_divergence,
    metric_mae,
    metric_rmse,
    true_zero_rate,
)
from streetkrig.model import DGCN, HeadOutput, build_h0, predict_expected
from streetkrig.pipeline import build_model, head_loss, prepare
from streetkrig.sampler import augment_features
from streetkrig.trainer import Adam, _sample_loss, train, train_experiment

from . import oracles

LOSSES = ["mae", "mse", "gnll", "nb", "zinb"]


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def toy_problem(loss, seed):
    """n=8, h=4, k_raw=3, z=6, K=2 with three masked nodes and a few missing cells."""
    rng = np.random.default_rng(seed)
    n, h, k_raw = 8, 4, 3
    X = rng.random((n, h, k_raw))
    M = np.ones((n, h))
    M[rng.choice(n, 3, replace=False)] = 0.0
    N = (rng.random((n, h)) > 0.15).astype(float)
    N[M[:, 0] == 0, 0] = 1.0  # keep the loss defined
    T = rng.poisson(3.0, size=(n, h)).astype(float) * N
    T_scaled = T / max(T.max(), 1.0)
    W = (rng.random((n, n)) < 0.4).astype(float)
    np.fill_diagonal(W, 0)
    model = DGCN(k_raw + 2, h, z=6, K=2, head=DGCN_HEAD[loss], seed=seed)
    H0 = build_h0(augment_features(X, M, N), T_scaled * M * N).data
    tp = transitions(W)
    w = loss_weights(M, N, "masked_only")

    def f(*params):
        return head_loss(model.forward(H0, tp), loss, T, T_scaled, w)

    return model, f


DGCN_HEAD = {"mae": "mae", "mse": "mae", "gnll": "gnll", "nb": "nb", "zinb": "zinb"}


@pytest.mark.criterion(1, "gradient check of every parameter for each loss, 10 seeds")
def test_criterion_1_gradients(request):
    t0 = time.perf_counter()
    worst = {}
    for loss in LOSSES:
        for seed in range(10):
            model, f = toy_problem(loss, seed)
            err = grad_check(f, list(model.params.values()), step=1e-5)
            worst[loss] = max(worst.get(loss, 0.0), err)
    elapsed = time.perf_counter() - t0
    detail(request, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s")
    assert max(worst.values()) <= 1e-4
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. distribution sanity
# ---------------------------------------------------------------------------

GRID = list(itertools.product((0.0, 0.3, 0.9), (0.5, 2.0, 10.0), (0.1, 0.5, 0.9)))


@pytest.mark.criterion(2, "NB/ZINB pmf mass, expectations and the pi=0 reduction")
def test_criterion_2_distributions(request):
    mass_err, mean_err = 0.0, 0.0
    for pi, n, p in GRID:
        _, ref_mean, kmax = oracles.truncated_moments(lambda k: oracles.zinb_pmf(k, n, p, pi))
        T = np.arange(kmax, dtype=float)
        full = np.full_like(T, 1.0)
        zinb = np.exp(zinb_log_pmf(T, n * full, p * full, pi * full).data).sum()
        nb = np.exp(nb_log_pmf(T, n * full, p * full).data).sum()
        mass_err = max(mass_err, abs(zinb - 1.0), abs(nb - 1.0))
        out = HeadOutput("zinb", n=Tensor(np.array([n])), p=Tensor(np.array([p])), pi=Tensor(np.array([pi])))
        mean_err = max(mean_err, abs(float(predict_expected(out).data[0]) - ref_mean))
    rng = np.random.default_rng(0)
    red_err = 0.0
    for _ in range(200):
        shape = (5, 7)
        T = rng.poisson(rng.uniform(0.5, 20), size=shape).astype(float)
        n, p = rng.uniform(0.05, 30, shape), rng.uniform(0.01, 0.99, shape)
        w = (rng.random(shape) < 0.7).astype(float)
        w[0, 0] = 1.0
        a = float(loss_zinb(n, p, np.zeros(shape), T, w).data)
        b = float(loss_nb(n, p, T, w).data)
        red_err = max(red_err, abs(a - b))
    detail(request, f"mass {mass_err:.1e}, mean {mean_err:.1e}, pi=0 {red_err:.1e}")
    assert mass_err <= 1e-8 and mean_err <= 1e-6 and red_err <= 1e-12


# ---------------------------------------------------------------------------
# 3. masking contract
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mask_panel():
    panel, graph = synth_generate(24, 64, k_raw=3, seed=5, missing_rate=0.1)
    split = make_split(panel.node_ids, 0.9, seed=5)
    return panel, graph, split


def _perturbed(exp, rng):
    """Copy of ``exp`` with junk in every missing cell and every test-node target."""
    bad = exp.N == 0
    bad[exp.test_idx] = True
    other = copy.copy(exp)
    other._cache = {}
    other.T = np.where(bad, rng.integers(1, 500, size=exp.T.shape).astype(float), exp.T)
    other.T_scaled = np.where(bad, rng.normal(scale=50.0, size=exp.T.shape), exp.T_scaled)
    return other, int(bad.sum())


@pytest.mark.criterion(3, "weight-0 targets leave loss, gradients and parameters unchanged")
def test_criterion_3_masking(request, mask_panel):
    panel, graph, split = mask_panel
    rng = np.random.default_rng(0)
    checked = 0
    for loss in LOSSES:
        cfg = TrainConfig(loss=loss, h=4, z=6, epochs=3, seed=1)
        exp = prepare(panel, [graph], split, cfg)
        junk, n_bad = _perturbed(exp, rng)

        # one sample end to end: loss value, every gradient, post-step parameters
        states = []
        for e in (exp, junk):
            model = build_model(e, seed=3)
            with fresh_tape():
                value = _sample_loss(model, e, cfg, 8, np.random.default_rng([1, 0, 8]), 15, 5, list(e.val_idx) + list(e.test_idx))
                value.backward()
            grads = {k: v.grad.copy() for k, v in model.params.items()}
            Adam(model.params).step()
            states.append((float(value.data), grads, model.state_dict()))
        (la, ga, pa), (lb, gb, pb) = states
        assert la == lb
        for k in ga:
            assert np.array_equal(ga[k], gb[k]) and np.array_equal(pa[k], pb[k])

        # label side: weight-0 entries of the loss target, including observed nodes
        model = build_model(exp, seed=4)
        H0 = np.random.default_rng(2).normal(size=(10, 4 * (exp.in_channels + 1)))
        tp = transitions(graph.W[:10, :10])
        M = np.ones((10, 4))
        M[:3] = 0
        N = (np.random.default_rng(3).random((10, 4)) > 0.2).astype(float)
        N[0, 0] = 1
        w = loss_weights(M, N, "masked_only")
        T = np.random.default_rng(4).poisson(3, size=(10, 4)).astype(float)
        res = []
        for T_lab in (T, np.where(w > 0, T, 999.0)):
            m = build_model(exp, seed=4)
            with fresh_tape():
                v = head_loss(m.forward(H0, tp), loss, T_lab, T_lab / 10.0, w)
                v.backward()
            g = {k: p.grad.copy() for k, p in m.params.items()}
            Adam(m.params).step()
            res.append((float(v.data), g, m.state_dict()))
        assert res[0][0] == res[1][0]
        for k in res[0][1]:
            assert np.array_equal(res[0][1][k], res[1][1][k]) and np.array_equal(res[0][2][k], res[1][2][k])

        # whole training runs, validation-based selection included
        _, ca = train_experiment(exp)
        _, cb = train_experiment(junk)
        assert ca.best_val_loss == cb.best_val_loss
        for k, v in ca.model.state_dict().items():
            assert np.array_equal(v, cb.model.params[k].data)
        checked += n_bad
    detail(request, f"{checked} perturbed cells across {len(LOSSES)} losses, all differences exactly 0")


# ---------------------------------------------------------------------------
# 4. graph math
# ---------------------------------------------------------------------------


def _all_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for mask in range(2 ** len(pairs)):
        A = np.zeros((n, n))
        for bit, (i, j) in enumerate(pairs):
            if mask >> bit & 1:
                A[i, j] = A[j, i] = 1.0
        yield A


@pytest.mark.criterion(4, "row-stochastic transitions, Chebyshev terms, connectivity hand values")
def test_criterion_4_graph(request):
    rng = np.random.default_rng(0)
    stoch = 0.0
    for _ in range(300):
        n = int(rng.integers(1, 12))
        W = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
        keep = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        for M in (W, W[np.ix_(keep, keep)]):
            tp = transitions(M)
            stoch = max(stoch, np.abs(tp.Wf.sum(1) - 1).max(), np.abs(tp.Wb.sum(1) - 1).max())
    cheb, graphs = 0.0, 0
    for n in range(1, 6):
        H = rng.normal(size=(n, 2))
        for A in _all_graphs(n):
            graphs += 1
            for M in (transitions(A).Wf, transitions(np.triu(A)).Wf):
                direct = oracles.chebyshev_direct(M, 4)
                for K in range(1, 5):
                    got = chebyshev_apply(M, H, K)
                    cheb = max(cheb, max(np.abs(got[k].data - direct[k] @ H).max() for k in range(K)))
    abc = ["a", "b", "c"]
    hand = [
        (build_binary([("a", "b"), ("b", "c")], abc), oracles.PATH3),
        (build_binary([("a", "b"), ("b", "c"), ("a", "c")], abc), oracles.TRIANGLE),
        (build_binary(list(itertools.combinations("abcd", 2)), list("abcd")), oracles.K4),
    ]
    conn = 0.0
    for g, ref in hand:
        c = connectivity(g)
        conn = max(conn, max(np.abs(np.asarray(c[k]) - np.asarray(v)).max() for k, v in ref.items()))
    detail(request, f"row sums {stoch:.1e}, chebyshev {cheb:.1e} over {graphs} graphs, connectivity {conn:.1e}")
    assert stoch <= 1e-10 and cheb <= 1e-10 and conn <= 1e-12


# ---------------------------------------------------------------------------
# 5. metric oracles
# ---------------------------------------------------------------------------


def _bundle(T, P):
    T = np.atleast_2d(np.asarray(T, dtype=float))
    return EvalBundle(T=T, pred=np.atleast_2d(np.asarray(P, dtype=float)), M=np.zeros_like(T), N=np.ones_like(T))


@pytest.mark.criterion(5, "MAE/RMSE/KL/true-zero oracles, KL >= 0, tau monotonicity")
def test_criterion_5_metrics(request):
    b = _bundle([0.0, 0.0], [3.0, -4.0])
    assert metric_mae(b) == 3.5
    assert abs(metric_rmse(b) - oracles.RMSE_3_MINUS4) <= 1e-12
    assert abs(kl_divergence([0.5, 0.5], [0.25, 0.75], eps=0.0) - oracles.KL_HALF_VS_QUARTER) <= 1e-12
    assert evaluate(_bundle([1.0, 4.0, 0.0], [1.0, 4.0, 0.0])).kl == 0.0
    assert true_zero_rate(_bundle([0.0, 0.0], [0.5, 0.5])) == 1.0
    assert true_zero_rate(_bundle([0.0, 0.0], [1.0, 1.0])) == 0.0
    assert true_zero_rate(_bundle([1.0], [0.0])) is None
    rng = np.random.default_rng(0)
    min_kl = np.inf
    for _ in range(10_000):
        k = int(rng.integers(1, 20))
        a, c = rng.integers(0, 10, size=(2, k))
        a[rng.integers(k)] += 1
        min_kl = min(min_kl, kl_divergence(a, c))
    assert min_kl >= 0.0
    preds = rng.normal(scale=2.0, size=500)
    zb = _bundle(np.zeros(500), preds)
    taus = np.linspace(0.01, 3.0, 60)
    rates = [true_zero_rate(zb, t) for t in taus]
    assert all(x <= y for x, y in zip(rates, rates[1:]))
    detail(request, f"min KL over 10^4 pairs {min_kl:.2e}; rate rises over {len(taus)} tau values")


# ---------------------------------------------------------------------------
# 6. directional ablation
# ---------------------------------------------------------------------------

ABLATION_BASE = dict(h=8, z=32, epochs=50)


@pytest.fixture(scope="module")
def ablation_panel():
    return synth_generate(64, 400, k_raw=4, zero_inflation=0.5, seed=0)


def _test_metrics(panel, graph, seed, **overrides):
    split = make_split(panel.node_ids, 0.9, seed=seed)
    cfg = TrainConfig(seed=seed, **ABLATION_BASE, **overrides)
    _, ckpt = train(panel, graph, split, cfg)
    return evaluate(interpolate(ckpt, panel, graph, split))


@pytest.mark.criterion(6, "full ZINB beats MAE on KL; features and masked-only loss lower test MAE")
def test_criterion_6_ablation(request, ablation_panel):
    panel, graph = ablation_panel
    t0 = time.perf_counter()
    wins = {"a": 0, "b": 0, "c": 0}
    rows = []
    for seed in range(3):
        full = _test_metrics(panel, graph, seed)
        mae_model = _test_metrics(panel, graph, seed, loss="mae")
        no_ind = _test_metrics(panel, graph, seed, indicators=False)
        no_feat = _test_metrics(panel, graph, seed, indicators=False, features=False)
        all_valid = _test_metrics(panel, graph, seed, loss_scope="all_valid")
        wins["a"] += full.kl < mae_model.kl
        wins["b"] += no_ind.mae < no_feat.mae
        wins["c"] += full.mae < all_valid.mae
        rows.append(
            f"s{seed}: kl {full.kl:.2f}/{mae_model.kl:.2f} mae(feat) {no_ind.mae:.2f}/{no_feat.mae:.2f}"
            f" mae(masked) {full.mae:.2f}/{all_valid.mae:.2f}"
        )
    elapsed = time.perf_counter() - t0
    detail(request, f"wins a={wins['a']}/3 b={wins['b']}/3 c={wins['c']}/3; " + "; ".join(rows) + f"; {elapsed:.0f}s")
    assert wins["a"] >= 2 and wins["b"] >= 2 and wins["c"] >= 2
    assert elapsed < 30 * 60


# ---------------------------------------------------------------------------
# 7. scarcity trend
# ---------------------------------------------------------------------------

COVERAGES = [0.05, 0.2, 0.5, 0.9]


@pytest.mark.criterion(7, "median test MAE non-increasing over coverage, one adjacent inversion allowed")
def test_criterion_7_coverage(request, ablation_panel):
    panel, graph = ablation_panel
    medians = []
    for cov in COVERAGES:
        maes = []
        for seed in range(3):
            split = make_split(panel.node_ids, cov, seed=seed)
            _, ckpt = train(panel, graph, split, TrainConfig(seed=seed, coverage=cov, **ABLATION_BASE))
            maes.append(evaluate(interpolate(ckpt, panel, graph, split)).mae)
        medians.append(float(np.median(maes)))
    inversions = sum(b > a for a, b in zip(medians, medians[1:]))
    detail(request, "median MAE " + ", ".join(f"{c:g}: {m:.2f}" for c, m in zip(COVERAGES, medians)) + f"; inversions {inversions}")
    assert inversions <= 1


# ---------------------------------------------------------------------------
# 8. integrated gradients
# ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "IG exact for a linear probe; completeness within 2% at 50 steps, tighter at 500")
def test_criterion_8_attribution(request):
    rng = np.random.default_rng(0)
    lin = 0.0
    for steps in (1, 50, 500):
        w, x = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        ig = integrated_gradients(lambda t: (t * w).sum(), x, steps=steps)
        lin = max(lin, float(np.abs(ig - w * x).max() / np.abs(w * x).max()))
    panel, graph = synth_generate(25, 120, k_raw=4, seed=2)
    split = make_split(panel.node_ids, 0.9, seed=2)
    _, ckpt = train(panel, graph, split, TrainConfig(h=6, z=16, epochs=8, seed=2))
    exp = prepare(panel, [graph], ckpt.split, ckpt.cfg, record=ckpt.record)
    seen = np.concatenate([exp.train_idx, exp.val_idx])
    g50, g500 = [], []
    for t0 in (0, 6, 12):
        inp = model_target(ckpt, exp, seen, exp.test_idx, t0)
        g50.append(completeness_gap(inp.f, inp.x, integrated_gradients(inp.f, inp.x, steps=50)))
        g500.append(completeness_gap(inp.f, inp.x, integrated_gradients(inp.f, inp.x, steps=500)))
    detail(request, f"linear rel {lin:.1e}; gap50 max {max(g50):.2e}; gap500 max {max(g500):.2e}")
    assert lin <= 1e-13
    assert max(g50) <= 0.02 and max(g500) <= 0.002
    assert all(b < a for a, b in zip(g50, g500))


# ---------------------------------------------------------------------------
# 9. determinism through the command line
# ---------------------------------------------------------------------------


@pytest.mark.criterion(9, "CLI train twice is bitwise identical; eval reproduces the best validation loss")
def test_criterion_9_determinism(request, tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--nodes", "25", "--steps", "80", "--seed", "1", "--run-dir", str(data)]) == 0
    flags = ["--data", str(data), "--h", "4", "--z", "12", "--epochs", "6", "--seed", "3"]
    for name in ("a", "b"):
        assert cli_main(["train", *flags, "--run-dir", str(tmp_path / name)]) == 0
    same = (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    ckpt = str(tmp_path / "a" / "checkpoint.json")
    assert cli_main(["eval", "--data", str(data), "--checkpoint", ckpt, "--run-dir", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    gap = abs(m["recomputed_val_loss"] - m["recorded_best_val_loss"])
    detail(request, f"checkpoints identical: {same}; val loss gap {gap:.1e}")
    assert same and gap <= 1e-10
