import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from particle_ebm import diffcore as dc
from particle_ebm import kernels
from particle_ebm.kernels import KernelSpec

from oracles import central_diff, rel_err

QUAD = dc.EnergyModel("analytic-scaled-quadratic", dim=2)


def mlp_kernel(rng, hidden=12, n_layers=2):
    m = dc.EnergyModel("mlp", dim=2, hidden=hidden, n_layers=n_layers)
    theta = m.init_params(rng) + 0.3 * rng.standard_normal(m.n_params)
    return KernelSpec("ntk-fixed", model=m, theta=theta)


def explicit_ntk(k, X, Y):
    # materialized parameter gradients: the definition, independent of the layered assembly
    return dc.grad_theta(X, k.theta, k.model) @ dc.grad_theta(Y, k.theta, k.model).T


class TestEval:
    def test_rbf_same_point(self):
        assert kernels.eval(KernelSpec("rbf", bandwidth=0.7), [1.0, 2.0], [1.0, 2.0]) == 1.0

    def test_rbf_value(self):
        v = kernels.eval(KernelSpec("rbf", bandwidth=math.sqrt(2)), [0.0, 0.0], [2.0, 0.0])
        assert v == pytest.approx(math.exp(-1), rel=1e-14)
        assert v == pytest.approx(0.367879, abs=1e-6)

    def test_ntk_scaled_quadratic(self):
        k = KernelSpec("ntk-fixed", model=QUAD, theta=np.ones(1))
        assert kernels.eval(k, [1.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("n_layers", [1, 2])
    def test_ntk_matches_explicit_gradients(self, rng, n_layers):
        k = mlp_kernel(rng, n_layers=n_layers)
        X = rng.standard_normal((5, 2))
        Y = rng.standard_normal((3, 2))
        np.testing.assert_allclose(kernels.gram(k, X, Y), explicit_ntk(k, X, Y), rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernels.eval(KernelSpec("rbf"), [0.0, 0.0], [0.0, 0.0, 0.0])

    def test_averaged_init_requires_draws(self, rng):
        k = KernelSpec("ntk-averaged-init", model=dc.EnergyModel(hidden=4), n_draws=2)
        with pytest.raises(ValueError):
            kernels.eval(k, [0.0, 0.0], [1.0, 0.0])
        k = k.redraw(rng)
        assert k.thetas.shape == (2, k.model.n_params)
        manual = np.mean(
            [explicit_ntk(KernelSpec("ntk-fixed", model=k.model, theta=t), [[0.0, 1.0]], [[1.0, 0.0]]) for t in k.thetas]
        )
        assert kernels.eval(k, [0.0, 1.0], [1.0, 0.0]) == pytest.approx(manual, rel=1e-12)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            KernelSpec("rbf", bandwidth=0.0)
        with pytest.raises(ValueError):
            KernelSpec("ntk-fixed", model=QUAD)
        with pytest.raises(ValueError):
            KernelSpec("laplace")


class TestGradient:
    def test_rbf_at_same_point(self):
        np.testing.assert_array_equal(kernels.grad_x_eval(KernelSpec("rbf"), [0.5, 0.5], [0.5, 0.5]), [0.0, 0.0])

    def test_rbf_closed_form(self):
        g = kernels.grad_x_eval(KernelSpec("rbf", bandwidth=1.0), [1.0, 0.0], [0.0, 0.0])
        np.testing.assert_allclose(g, [-math.exp(-0.5), 0.0], rtol=1e-14)
        assert g[0] == pytest.approx(-0.606531, abs=1e-6)

    def test_rbf_finite_differences(self, rng):
        k = KernelSpec("rbf", bandwidth=0.8)
        for _ in range(5):
            x, y = rng.standard_normal((2, 2))
            fd = central_diff(lambda z: kernels.eval(k, z, y), x, h=1e-6)
            assert rel_err(kernels.grad_x_eval(k, x, y), fd) <= 1e-6

    @pytest.mark.parametrize("n_layers", [1, 2])
    def test_ntk_finite_differences(self, rng, n_layers):
        k = mlp_kernel(rng, n_layers=n_layers)
        for _ in range(5):
            x, y = rng.standard_normal((2, 2))
            fd = central_diff(lambda z: kernels.eval(k, z, y), x, h=1e-6)
            assert rel_err(kernels.grad_x_eval(k, x, y), fd) <= 1e-6

    @pytest.mark.parametrize("kind", ["rbf", "ntk"])
    def test_mean_grad_matches_gram_grad(self, rng, kind):
        k = KernelSpec("rbf", bandwidth=1.3) if kind == "rbf" else mlp_kernel(rng)
        X = rng.standard_normal((6, 2))
        Y = rng.standard_normal((4, 2))
        np.testing.assert_allclose(
            kernels.mean_grad_x(k, X, Y), kernels.grad_x_gram(k, X, Y).mean(axis=1), rtol=1e-10, atol=1e-13
        )

    def test_ntk_non_mlp_path(self, rng):
        k = KernelSpec("ntk-fixed", model=QUAD, theta=np.array([0.7]))
        x, y = rng.standard_normal((2, 2))
        # grad_x (||x||^2 ||y||^2 / 4) = x ||y||^2 / 2
        np.testing.assert_allclose(kernels.grad_x_eval(k, x, y), x * (y @ y) / 2, rtol=1e-14)


class TestMMD:
    def test_identical_sets(self, rng):
        X = rng.standard_normal((20, 2))
        assert abs(kernels.mmd2_vstat(KernelSpec("rbf"), X, X.copy())) <= 1e-12

    def test_singletons(self):
        v = kernels.mmd2_vstat(KernelSpec("rbf", bandwidth=math.sqrt(2)), [[0.0, 0.0]], [[2.0, 0.0]])
        assert v == pytest.approx(2 - 2 * math.exp(-1), rel=1e-14)
        assert v == pytest.approx(1.264241, abs=1e-6)

    def test_permutation_invariant(self, rng):
        k = KernelSpec("rbf", bandwidth=1.1)
        X = rng.standard_normal((15, 2))
        Y = rng.standard_normal((9, 2))
        a = kernels.mmd2_vstat(k, X, Y)
        b = kernels.mmd2_vstat(k, X[rng.permutation(15)], Y)
        assert a == pytest.approx(b, rel=1e-13)

    def test_symmetric_exactly(self, rng):
        for k in (KernelSpec("rbf", bandwidth=0.9), mlp_kernel(rng)):
            X = rng.standard_normal((7, 2))
            Y = rng.standard_normal((11, 2))
            assert kernels.mmd2_vstat(k, X, Y) == kernels.mmd2_vstat(k, Y, X)

    def test_nonnegative(self, rng):
        for _ in range(20):
            X = rng.standard_normal((rng.integers(1, 10), 2))
            Y = rng.standard_normal((rng.integers(1, 10), 2))
            assert kernels.mmd2_vstat(KernelSpec("rbf"), X, Y) >= -1e-12

    def test_unbiased_variant(self, rng):
        k = KernelSpec("rbf", bandwidth=1.0)
        X = rng.standard_normal((5, 2))
        Y = rng.standard_normal((4, 2))
        Kxx = kernels.gram(k, X, X)
        Kyy = kernels.gram(k, Y, Y)
        expected = (
            (Kxx.sum() - np.trace(Kxx)) / 20 + (Kyy.sum() - np.trace(Kyy)) / 12 - 2 * kernels.gram(k, X, Y).mean()
        )
        assert kernels.mmd2_ustat(k, X, Y) == pytest.approx(expected, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            kernels.mmd2_vstat(KernelSpec("rbf"), np.zeros((0, 2)), [[0.0, 0.0]])


class TestKLDescentIdentity:
    def test_identical(self, rng):
        X = rng.standard_normal((6, 2))
        lhs, rhs = kernels.kl_descent_identity_check(KernelSpec("rbf"), X, X)
        assert abs(lhs) <= 1e-15 and abs(rhs) <= 1e-15

    def test_singletons(self):
        lhs, rhs = kernels.kl_descent_identity_check(
            KernelSpec("rbf", bandwidth=math.sqrt(2)), [[0.0, 0.0]], [[2.0, 0.0]]
        )
        assert lhs == pytest.approx(-1.264241, abs=1e-6)
        assert lhs == pytest.approx(rhs, abs=1e-15)

    def test_double_sum_oracle(self, rng):
        # independent evaluation: explicit loops over every pair
        k = KernelSpec("rbf", bandwidth=0.9)
        Xp = rng.standard_normal((7, 2))
        Xq = rng.standard_normal((11, 2)) + 0.5

        def kk(a, b):
            return math.exp(-float(np.sum((a - b) ** 2)) / (2 * 0.9**2))

        def rate(xp):
            return sum(kk(x, xp) for x in Xq) / len(Xq) - sum(kk(x, xp) for x in Xp) / len(Xp)

        lhs_loop = sum(rate(x) for x in Xp) / len(Xp) - sum(rate(x) for x in Xq) / len(Xq)
        lhs, rhs = kernels.kl_descent_identity_check(k, Xp, Xq)
        assert abs(lhs - rhs) <= 1e-12
        assert abs(lhs - lhs_loop) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(m=st.integers(1, 30), n=st.integers(1, 30), seed=st.integers(0, 2**32 - 1))
    def test_property(self, m, n, seed):
        r = np.random.default_rng(seed)
        k = KernelSpec("rbf", bandwidth=r.uniform(0.2, 3.0))
        lhs, rhs = kernels.kl_descent_identity_check(k, r.standard_normal((m, 2)), 2 * r.standard_normal((n, 2)))
        assert abs(lhs - rhs) <= 1e-12


class TestGramProperties:
    @pytest.mark.parametrize("kind", ["rbf", "ntk"])
    def test_symmetric_psd(self, rng, kind):
        k = KernelSpec("rbf", bandwidth=0.6) if kind == "rbf" else mlp_kernel(rng)
        for _ in range(5):
            X = rng.standard_normal((12, 2))
            K = kernels.gram(k, X, X)
            np.testing.assert_array_equal(K, K.T)
            assert np.linalg.eigvalsh(K).min() >= -1e-8 * np.trace(K)

    def test_pairwise_symmetry(self, rng):
        k = mlp_kernel(rng)
        x, y = rng.standard_normal((2, 2))
        assert kernels.eval(k, x, y) == kernels.eval(k, y, x)

    def test_averaged_init_variance_shrinks(self):
        model = dc.EnergyModel(hidden=16)
        x, y = np.array([0.3, -0.5]), np.array([1.0, 0.4])
        base = np.random.default_rng(99)

        def replicate_var(m, reps=300):
            spec = KernelSpec("ntk-averaged-init", model=model, n_draws=m)
            vals = [kernels.eval(spec.redraw(base), x, y) for _ in range(reps)]
            return np.var(vals)

        ratio = replicate_var(4) / replicate_var(64)
        # ideal ratio 16; allow sampling noise of the variance estimates
        assert 8 <= ratio <= 32


def test_median_bandwidth():
    X = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    assert kernels.median_bandwidth(X) == pytest.approx(4.0)
    assert kernels.median_bandwidth(X[:2], X[2:]) == pytest.approx(4.0)
