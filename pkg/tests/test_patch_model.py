import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import trapezoid

from conftest import gaussian_model, random_orthogonal_filters, toy_model
from gmdm.filter_bank import FilterBank, init_filters
from gmdm.gmm_core import MeanGrid, expert_cdf
from gmdm.patch_model import PatchModel, dense_oracle

TIMES = (0.0, 0.005, 0.02, 0.08)


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1.0)


class TestConstruction:
    def test_rejects_non_orthogonal(self, rng):
        with pytest.raises(ValueError, match="orthogonal"):
            PatchModel(FilterBank(rng.standard_normal((4, 3))), np.zeros((3, 3)), MeanGrid(3))

    def test_rejects_wrong_logit_shape(self):
        with pytest.raises(ValueError):
            PatchModel(init_filters(2, seed=0), np.zeros((3, 4)), MeanGrid(3))

    @pytest.mark.parametrize("b,count", [(7, 8352), (15, 78400)])
    def test_param_count(self, b, count):
        assert PatchModel.initial(init_filters(b, seed=0)).param_count() == count

    def test_c_follows_filters(self, rng):
        m = toy_model(rng)
        np.testing.assert_allclose([e.c for e in m.experts], np.sum(m.K**2, axis=0))


class TestDensity:
    @pytest.mark.parametrize("t", TIMES)
    def test_dense_oracle_a2(self, rng, t):
        m = toy_model(rng, a=2, J=2, L=2)
        p = rng.normal(0, 1, (20, 2))
        assert rel_err(m.logpdf(p, t), dense_oracle(m).logpdf(p, t)).max() < 1e-10

    def test_orthonormal_oracle_covariance(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        m = PatchModel(FilterBank(Q), rng.standard_normal((2, 2)), MeanGrid(2, 1.0, 0.4))
        d = dense_oracle(m)
        assert d.means.shape == (4, 2)
        np.testing.assert_allclose(d.cov, 0.16 * np.eye(2), atol=1e-15)
        assert d.weights.sum() == pytest.approx(1.0)

    def test_oracle_refuses_large_instances(self):
        m = PatchModel.initial(init_filters(3, seed=0), MeanGrid(25))
        with pytest.raises(ValueError):
            dense_oracle(m)

    @pytest.mark.parametrize("t", [0.0, 0.02])
    def test_quadrature_normalisation(self, rng, t):
        # integrate exp(logpdf) over span coordinates alpha_j along k_j / |k_j|
        m = toy_model(rng, a=3, J=2, L=3, sigma0=0.4)
        khat = m.K / np.sqrt(m.norms_sq)
        g = np.linspace(-8, 8, 1601)
        A, B = np.meshgrid(g, g, indexing="ij")
        P = A[..., None] * khat[:, 0] + B[..., None] * khat[:, 1]
        f = np.exp(m.logpdf(P, t))
        assert trapezoid(trapezoid(f, g, axis=1), g) == pytest.approx(1.0, abs=1e-6)

    def test_dc_invariance(self, rng):
        m = toy_model(rng, zero_mean=True)
        p = rng.normal(size=(10, 4))
        np.testing.assert_allclose(m.logpdf(p + 0.37, 0.01), m.logpdf(p, 0.01), rtol=1e-12)
        np.testing.assert_allclose(m.score(p + 0.37, 0.01), m.score(p, 0.01), atol=1e-12)

    def test_scalar_and_batch_shapes(self, rng):
        m = toy_model(rng)
        p = rng.normal(size=(2, 5, 4))
        assert m.logpdf(p).shape == (2, 5)
        assert np.ndim(m.logpdf(p[0, 0])) == 0
        assert m.score(p, 0.01).shape == p.shape

    def test_per_sample_times(self, rng):
        m = toy_model(rng)
        p = rng.normal(size=(3, 4))
        t = np.array([0.0, 0.01, 0.05])
        np.testing.assert_allclose(m.logpdf(p, t), [m.logpdf(p[i], t[i]) for i in range(3)])


class TestScore:
    def test_finite_differences(self, rng):
        m = toy_model(rng, L=5)
        p = rng.normal(size=4)
        h = 1e-6
        fd = [(m.logpdf(p + h * e, 0.02) - m.logpdf(p - h * e, 0.02)) / (2 * h) for e in np.eye(4)]
        np.testing.assert_allclose(m.score(p, 0.02), fd, rtol=1e-5, atol=1e-8)

    def test_in_span(self, rng):
        m = toy_model(rng, a=5, J=2)
        v = np.linalg.svd(m.K)[0][:, 2:]
        s = m.score(rng.normal(size=(20, 5)), 0.01)
        assert np.abs(s @ v).max() < 1e-12

    def test_single_component_closed_form(self, rng):
        m = gaussian_model(rng)
        p = rng.normal(size=(6, 4))
        t = 0.03
        var = m.grid.sigma0**2 + 2 * t * m.norms_sq
        np.testing.assert_allclose(m.score(p, t), -((p @ m.K) / var) @ m.K.T, rtol=1e-12, atol=1e-14)


class TestEbStep:
    def test_wiener_shrinkage(self, rng):
        m = gaussian_model(rng)
        y = rng.normal(size=(8, 4))
        t = 0.02
        factor = m.grid.sigma0**2 / (m.grid.sigma0**2 + 2 * t * m.norms_sq)
        np.testing.assert_allclose(m.eb_step(y, t) @ m.K, (y @ m.K) * factor, rtol=1e-12)
        assert np.all((factor > 0) & (factor < 1))

    def test_dc_passes_through(self, rng):
        m = gaussian_model(rng)
        y = rng.normal(size=(8, 4))
        np.testing.assert_allclose(m.eb_step(y, 0.05).mean(axis=1), y.mean(axis=1), atol=1e-14)

    def test_zero_time_identity_and_limit(self, rng):
        m = toy_model(rng)
        y = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(m.eb_step(y, 0.0), y)
        np.testing.assert_allclose(m.eb_step(y, 1e-12), y, atol=1e-9)

    @pytest.mark.parametrize("t", [0.005, 0.02, 0.08])
    def test_dense_posterior_mean(self, rng, t):
        m = toy_model(rng, a=2, J=2, L=2)
        y = rng.normal(0, 1, (10, 2))
        assert rel_err(m.eb_step(y, t), dense_oracle(m).posterior_mean(y, t)).max() < 1e-8


class TestSampling:
    @pytest.mark.parametrize("s", [0.0, 0.1])
    def test_marginals_ks(self, rng, s):
        m = toy_model(rng, zero_mean=True, L=5)
        t = 0.5 * s * s
        P = m.sample(t, np.random.default_rng(3), size=20000)
        for j, e in enumerate(m.experts):
            assert stats.kstest(P @ m.K[:, j], lambda v: expert_cdf(v, e, m.grid, t)).pvalue > 0.01

    def test_single_component_response_std(self, rng):
        m = gaussian_model(rng, sigma0=0.3)
        P = m.sample(0.0, np.random.default_rng(0), size=50000)
        z = (P - 0.5) @ (m.K / np.sqrt(m.norms_sq))
        np.testing.assert_allclose(z.std(axis=0), 0.3 / np.sqrt(m.norms_sq), rtol=0.02)

    def test_reproducible_with_dc(self, rng):
        m = toy_model(rng, zero_mean=True)
        a = m.sample(0.01, np.random.default_rng(7), dc=0.25)
        b = m.sample(0.01, np.random.default_rng(7), dc=0.25)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4,)
        assert a.mean() == pytest.approx(0.25)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(2, 2, 2), (4, 3, 3), (4, 2, 3), (3, 3, 2)]),
       st.sampled_from(TIMES))
def test_property_factored_equals_dense(seed, dims, t):
    rng = np.random.default_rng(seed)
    a, J, L = dims
    m = toy_model(rng, a=a, J=J, L=L, sigma0=rng.uniform(0.2, 1.0), logit_scale=2.0)
    p = rng.normal(0, 1.5, (8, a))
    assert rel_err(m.logpdf(p, t), dense_oracle(m).logpdf(p, t)).max() < 1e-10


def test_random_orthogonal_helper(rng):
    K = random_orthogonal_filters(rng, 5, 4, zero_mean=True)
    assert FilterBank(K).is_orthogonal() and FilterBank(K).is_zero_mean()
