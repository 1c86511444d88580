import math

import numpy as np
import pytest

from streetkrig.autodiff import Tensor, fresh_tape, grad_check
from streetkrig.errors import ConfigError, DimensionError
from streetkrig.graph import transitions
from streetkrig.losses import loss_mae, loss_zinb
from streetkrig.model import DGCN, HeadOutput, build_h0, predict_expected, unflatten_h0

from . import oracles


def relu(x):
    return np.maximum(x, 0.0)


def random_graph(n, rng):
    W = (rng.random((n, n)) < 0.5).astype(float) * rng.random((n, n))
    np.fill_diagonal(W, 0)
    return W


class TestBuildH0:
    def test_width(self):
        assert build_h0(np.zeros((2, 3, 2)), np.zeros((2, 3))).shape == (2, 9)

    def test_zero_input(self):
        assert np.all(build_h0(np.zeros((3, 4, 1)), np.zeros((3, 4))).data == 0)

    def test_layout_time_major(self, rng):
        X, T = rng.random((2, 3, 2)), rng.random((2, 3))
        H0 = build_h0(X, T).data
        assert H0[1, 1 * 3 + 0] == X[1, 1, 0]
        assert H0[1, 2 * 3 + 2] == T[1, 2]

    def test_round_trip(self, rng):
        X, T = rng.random((4, 5, 3)), rng.random((4, 5))
        back = unflatten_h0(build_h0(X, T).data, 5)
        np.testing.assert_array_equal(back[:, :, :3], X)
        np.testing.assert_array_equal(back[:, :, 3], T)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            build_h0(np.zeros((2, 3, 1)), np.zeros((2, 4)))


class TestForward:
    def test_zero_weights_give_bias(self):
        m = DGCN(2, h=3, z=5, K=2, head="zinb", seed=0)
        for k, v in m.params.items():
            if "theta" in k:
                v.data[:] = 0
        b = np.arange(5.0)
        m.params["t0.ln3.bias"].data = b.copy()
        tp = transitions(random_graph(4, np.random.default_rng(0)))
        H3 = m.tower_forward(np.random.default_rng(1).random((4, 9)), tp)
        np.testing.assert_array_equal(H3.data, np.tile(b, (4, 1)))

    def test_single_node_by_hand(self, rng):
        # 1x1 W becomes a self loop; T_1 = T_2 = 1, so each layer sums its four blocks
        m = DGCN(0, h=2, z=3, K=2, head="mae", seed=4)
        for k in ("ln1", "ln2", "ln3"):
            m.params[f"t0.{k}.gain"].data = rng.random(m.params[f"t0.{k}.gain"].shape) + 0.5
            m.params[f"t0.{k}.bias"].data = rng.normal(size=m.params[f"t0.{k}.bias"].shape)
        x = np.array([[0.7, -1.3]])
        P = {k: v.data for k, v in m.params.items()}

        def blocks(theta, d):
            return sum(theta[i * d : (i + 1) * d] for i in range(4))

        def ln(v, name):
            return oracles.layer_norm_np(v, P[f"t0.{name}.gain"], P[f"t0.{name}.bias"], 1e-5)

        h1 = ln(relu(x @ blocks(P["t0.theta1"], 2)), "ln1")
        h2 = ln(relu(h1 @ blocks(P["t0.theta2"], 3)) + h1, "ln2")
        h3 = ln(h2 @ blocks(P["t0.theta3"], 3), "ln3")
        out = m.forward(x, transitions(np.zeros((1, 1))))
        np.testing.assert_allclose(out.mean.data, h3, atol=1e-12)

    def test_k1_identity_is_dense(self, rng):
        m = DGCN(3, h=4, z=6, K=1, head="nb", seed=2)
        H0 = rng.normal(size=(5, 16))
        P = {k: v.data for k, v in m.params.items()}

        def dense(H, layer, d):
            th = P[f"t0.theta{layer}"]
            return H @ (th[:d] + th[d:])

        def ln(v, i):
            return oracles.layer_norm_np(v, P[f"t0.ln{i}.gain"], P[f"t0.ln{i}.bias"], 1e-5)

        h1 = ln(relu(dense(H0, 1, 16)), 1)
        h2 = ln(relu(dense(h1, 2, 6)) + h1, 2)
        h3 = ln(dense(h2, 3, 6), 3)
        got = m.tower_forward(H0, transitions(np.eye(5)))
        np.testing.assert_allclose(got.data, h3, atol=1e-12)

    @pytest.mark.parametrize("head", ["mae", "gnll", "nb", "zinb"])
    def test_permutation_equivariance(self, head, rng):
        n = 4
        m = DGCN(2, h=3, z=5, K=2, head=head, seed=1)
        W = random_graph(n, rng)
        H0 = rng.normal(size=(n, 9))
        base = predict_expected(m.forward(H0, transitions(W))).data
        for P in oracles.permutation_matrices(n):
            out = predict_expected(m.forward(P @ H0, transitions(P @ W @ P.T))).data
            np.testing.assert_allclose(out, P @ base, atol=1e-12)

    def test_width_checks(self):
        m = DGCN(2, h=3, z=4)
        with pytest.raises(DimensionError):
            m.forward(np.zeros((3, 8)), transitions(np.zeros((3, 3))))
        with pytest.raises(DimensionError):
            m.forward(np.zeros((3, 9)), transitions(np.zeros((2, 2))))

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            DGCN(1, h=2, head="poisson")
        with pytest.raises(ConfigError):
            DGCN(1, h=2, head="mae", towers=2)


class TestHeads:
    def test_zero_head_weights(self):
        m = DGCN(1, h=2, z=3, head="zinb")
        for k, v in m.params.items():
            if k.startswith("head."):
                v.data[:] = 0
        out = m.apply_head(Tensor(np.random.default_rng(0).normal(size=(4, 3))))
        np.testing.assert_allclose(out.p.data, 0.5)
        np.testing.assert_allclose(out.pi.data, 0.5)
        np.testing.assert_allclose(out.n.data, oracles.SOFTPLUS_0 + 1e-6, atol=1e-15)

    def test_mae_head_is_identity(self, rng):
        m = DGCN(1, h=3, z=4, head="mae")
        H3 = Tensor(rng.normal(size=(2, 3)))
        assert m.apply_head(H3).mean is H3

    @pytest.mark.parametrize("head", ["gnll", "nb", "zinb"])
    def test_domains_on_random_inputs(self, head):
        m = DGCN(1, h=4, z=8, head=head, seed=3)
        rng = np.random.default_rng(7)
        H3 = rng.normal(size=(25_000, 8)) * rng.choice([0.1, 1.0, 10.0, 1e3], size=(25_000, 1))
        out = m.apply_head(Tensor(H3))
        if head == "gnll":
            assert np.all(out.var.data > 0)
            return
        assert np.all(out.n.data > 0)
        assert np.all((out.p.data > 0) & (out.p.data < 1))
        if head == "zinb":
            assert np.all((out.pi.data > 0) & (out.pi.data < 1))
        assert np.all(np.isfinite(predict_expected(out).data))


class TestPredictExpected:
    def t(self, v):
        return Tensor(np.array([v], dtype=float))

    def test_nb_mean(self):
        assert predict_expected(HeadOutput("nb", n=self.t(3), p=self.t(0.5))).data[0] == 3.0

    def test_zinb_all_zero(self):
        out = HeadOutput("zinb", n=self.t(3), p=self.t(0.2), pi=self.t(1.0))
        assert predict_expected(out).data[0] == 0.0

    def test_zinb_reduces_to_nb(self):
        a = predict_expected(HeadOutput("zinb", n=self.t(2.5), p=self.t(0.3), pi=self.t(0.0))).data
        b = predict_expected(HeadOutput("nb", n=self.t(2.5), p=self.t(0.3))).data
        assert a[0] == b[0]

    def test_p_clamped(self):
        out = HeadOutput("nb", n=self.t(1.0), p=self.t(0.0))
        assert predict_expected(out).data[0] == pytest.approx((1 - 1e-6) / 1e-6)


class TestDualTowers:
    def test_tied_duplicates(self, rng):
        m = DGCN(1, h=2, z=3, head="nb", towers=2, seed=0)
        for k in list(m.params):
            if k.startswith("t1."):
                m.params[k].data = m.params["t0." + k[3:]].data.copy()
        tp = transitions(random_graph(4, rng))
        H0 = rng.normal(size=(4, 4))
        a = m.tower_forward(H0, tp, 0).data
        b = m.tower_forward(H0, tp, 1).data
        np.testing.assert_array_equal(a, b)
        assert m.params["head.n.w"].shape == (6, 2)

    def test_gradient_reaches_both_towers(self, rng):
        m = DGCN(1, h=2, z=3, head="zinb", towers=2, seed=0)
        tps = [transitions(random_graph(4, rng)), transitions(random_graph(4, rng))]
        H0 = rng.normal(size=(4, 4))
        T = rng.poisson(2.0, size=(4, 2)).astype(float)
        with fresh_tape():
            out = m.forward(H0, tps)
            loss_zinb(out.n, out.p, out.pi, T, np.ones_like(T)).backward()
        for s in (0, 1):
            assert np.any(m.params[f"t{s}.theta1"].grad != 0)

        def f(*params):
            o = m.forward(H0, tps)
            return loss_zinb(o.n, o.p, o.pi, T, np.ones_like(T))

        assert grad_check(f, [m.params["t0.theta3"], m.params["t1.theta3"]]) <= 1e-4

    def test_mismatched_adjacency(self, rng):
        m = DGCN(1, h=2, z=3, head="nb", towers=2)
        with pytest.raises(DimensionError):
            m.forward(np.zeros((3, 4)), [transitions(np.zeros((3, 3))), transitions(np.zeros((2, 2)))])


class TestStateDict:
    def test_round_trip(self):
        a, b = DGCN(2, h=3, z=4, seed=1), DGCN(2, h=3, z=4, seed=2)
        b.load_state_dict(a.state_dict())
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_shape_mismatch(self):
        a, b = DGCN(2, h=3, z=4), DGCN(2, h=3, z=5)
        with pytest.raises(DimensionError):
            b.load_state_dict(a.state_dict())


class TestMaeCancellation:
    def test_bias_gradient_exactly_zero(self):
        # h = 1 makes LN3 a single column, so every prediction equals the LN3 bias;
        # targets one above and one below give opposite signs and a zero gradient
        m = DGCN(0, h=1, z=3, head="mae", seed=0)
        bias = m.params["t0.ln3.bias"]
        bias.data = np.array([0.25])
        H0 = np.array([[0.3], [-0.8]])
        tp = transitions(np.array([[0.0, 1.0], [1.0, 0.0]]))
        T = np.array([[-0.75], [1.25]])

        def f(b):
            return loss_mae(m.forward(H0, tp).mean, T, np.ones_like(T))

        with fresh_tape():
            f(bias).backward()
        assert bias.grad[0] == 0.0
        lo, hi = 0.25 - 1e-5, 0.25 + 1e-5
        vals = []
        for v in (hi, lo):
            bias.data = np.array([v])
            vals.append(float(f(bias).data))
        assert abs((vals[0] - vals[1]) / 2e-5) < 1e-10
        assert math.isclose(vals[0], 1.0, abs_tol=1e-12)
