"""Dataset tests: sampling moments, determinism, MI closed forms against a
numerical-integration oracle, and the exact density-ratio critic."""

import numpy as np
import pytest
from scipy import integrate

from flatnce.data import (
    Batch,
    DatasetSpec,
    density_ratio_critic,
    rho_for_mi,
    rng_stream,
    sample_batch,
    standard_normals,
    true_mi,
)


def quadrature_mi_bivariate(cov):
    """MI of a zero-mean bivariate Gaussian by direct 2-D quadrature."""
    vx, vy, cxy = cov[0][0], cov[1][1], cov[0][1]
    det = vx * vy - cxy**2
    inv = np.linalg.inv(np.array(cov))

    def integrand(y, x):
        quad_joint = inv[0, 0] * x * x + 2 * inv[0, 1] * x * y + inv[1, 1] * y * y
        log_joint = -0.5 * quad_joint - np.log(2 * np.pi) - 0.5 * np.log(det)
        log_px = -0.5 * x * x / vx - 0.5 * np.log(2 * np.pi * vx)
        log_py = -0.5 * y * y / vy - 0.5 * np.log(2 * np.pi * vy)
        return np.exp(log_joint) * (log_joint - log_px - log_py)

    lim = 8.0 * np.sqrt(max(vx, vy))
    value, _ = integrate.dblquad(integrand, -lim, lim, -lim, lim, epsabs=1e-10)
    return value


class TestSpecValidation:
    def test_bad_kind(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            DatasetSpec(kind="uniform")

    def test_bad_rho(self):
        with pytest.raises(ValueError, match="rho"):
            DatasetSpec(rho=1.0)

    def test_bad_dim_and_sigma(self):
        with pytest.raises(ValueError, match="dim"):
            DatasetSpec(dim=0)
        with pytest.raises(ValueError, match="sigma"):
            DatasetSpec(kind="shared_latent_views", sigma=0.0)

    def test_small_batch_rejected(self):
        spec = DatasetSpec()
        with pytest.raises(ValueError, match=">= 2"):
            sample_batch(spec, 1, spec.rng())


class TestSamplingMoments:
    def test_independent_pairs_are_uncorrelated(self):
        spec = DatasetSpec(kind="correlated_gaussian", dim=1, rho=0.0, seed=1)
        batch = sample_batch(spec, 100_000, spec.rng())
        r = np.corrcoef(batch.xs[:, 0], batch.ys[:, 0])[0, 1]
        assert abs(r) < 0.01

    def test_correlation_matches_rho(self):
        spec = DatasetSpec(kind="correlated_gaussian", dim=1, rho=0.9, seed=2)
        batch = sample_batch(spec, 100_000, spec.rng())
        r = np.corrcoef(batch.xs[:, 0], batch.ys[:, 0])[0, 1]
        assert abs(r - 0.9) < 0.01

    def test_box_muller_moments(self):
        z = standard_normals(rng_stream(3), (200_000,))
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_cubic_is_cubed_gaussian(self):
        base = DatasetSpec(kind="correlated_gaussian", dim=2, rho=0.5, seed=7)
        cubic = DatasetSpec(kind="cubic_gaussian", dim=2, rho=0.5, seed=7)
        b1 = sample_batch(base, 64, base.rng())
        b2 = sample_batch(cubic, 64, cubic.rng())
        np.testing.assert_array_equal(b2.xs, b1.xs)
        np.testing.assert_array_equal(b2.ys, b1.ys**3)

    def test_views_composition(self):
        spec = DatasetSpec(kind="shared_latent_views", dim=3, sigma=0.5, seed=9)
        batch = sample_batch(spec, 50_000, spec.rng())
        # var(x) = 1 + sigma^2, cov(x, y) = 1 per dimension
        assert abs(batch.xs.var() - 1.25) < 0.02
        cov = np.mean(batch.xs * batch.ys) - batch.xs.mean() * batch.ys.mean()
        assert abs(cov - 1.0) < 0.02


class TestDeterminism:
    def test_fixed_seed_bit_identical(self):
        spec = DatasetSpec(kind="shared_latent_views", dim=4, sigma=2.0, seed=123)
        a = sample_batch(spec, 32, spec.rng())
        b = sample_batch(spec, 32, spec.rng())
        assert a.xs.tobytes() == b.xs.tobytes()
        assert a.ys.tobytes() == b.ys.tobytes()

    def test_draw_index_matters_but_is_reproducible(self):
        spec = DatasetSpec(seed=5)
        rng1, rng2 = spec.rng(), spec.rng()
        first1, second1 = sample_batch(spec, 8, rng1), sample_batch(spec, 8, rng1)
        first2, second2 = sample_batch(spec, 8, rng2), sample_batch(spec, 8, rng2)
        assert first1.xs.tobytes() == first2.xs.tobytes()
        assert second1.xs.tobytes() == second2.xs.tobytes()
        assert first1.xs.tobytes() != second1.xs.tobytes()

    def test_streams_are_independent(self):
        a = standard_normals(rng_stream(0, stream=1), (16,))
        b = standard_normals(rng_stream(0, stream=2), (16,))
        assert a.tobytes() != b.tobytes()


class TestTrueMi:
    def test_independence_gives_zero(self):
        assert true_mi(DatasetSpec(rho=0.0, dim=5)) == 0.0

    def test_gaussian_closed_form(self):
        spec = DatasetSpec(rho=0.9, dim=1)
        expected = -0.5 * np.log(0.19)
        np.testing.assert_allclose(true_mi(spec), expected, rtol=1e-14)
        np.testing.assert_allclose(expected, 0.83036560, atol=1e-7)

    def test_gaussian_against_quadrature(self):
        rho = 0.9
        quad = quadrature_mi_bivariate([[1.0, rho], [rho, 1.0]])
        np.testing.assert_allclose(true_mi(DatasetSpec(rho=rho, dim=1)), quad, atol=1e-7)

    def test_cubic_same_oracle_as_gaussian(self):
        g = DatasetSpec(kind="correlated_gaussian", rho=0.7, dim=3)
        c = DatasetSpec(kind="cubic_gaussian", rho=0.7, dim=3)
        assert true_mi(g) == true_mi(c)

    def test_views_formula_against_quadrature(self):
        # Must hold before the views oracle is trusted anywhere else.
        for sigma in (0.5, 1.0, 2.0):
            spec = DatasetSpec(kind="shared_latent_views", dim=1, sigma=sigma)
            s2 = sigma**2
            cov = [[1.0 + s2, 1.0], [1.0, 1.0 + s2]]
            quad = quadrature_mi_bivariate(cov)
            np.testing.assert_allclose(true_mi(spec), quad, atol=1e-7)

    def test_views_scales_linearly_in_dim(self):
        one = true_mi(DatasetSpec(kind="shared_latent_views", dim=1, sigma=1.5))
        many = true_mi(DatasetSpec(kind="shared_latent_views", dim=6, sigma=1.5))
        np.testing.assert_allclose(many, 6 * one, rtol=1e-14)

    def test_rho_for_mi_inverts_closed_form(self):
        rho = rho_for_mi(6.0, 20)
        np.testing.assert_allclose(true_mi(DatasetSpec(rho=rho, dim=20)), 6.0, rtol=1e-12)
        np.testing.assert_allclose(rho, 0.6717060, atol=1e-6)


class TestDensityRatioCritic:
    def test_zero_rho_gives_zero_scores(self):
        spec = DatasetSpec(rho=0.0, dim=2, seed=11)
        critic = density_ratio_critic(spec)
        batch = sample_batch(spec, 16, spec.rng())
        np.testing.assert_allclose(critic(batch.xs, batch.ys), 0.0, atol=1e-12)

    def test_non_gaussian_kind_rejected(self):
        with pytest.raises(ValueError, match="correlated_gaussian"):
            density_ratio_critic(DatasetSpec(kind="cubic_gaussian", rho=0.5))
        with pytest.raises(ValueError, match="correlated_gaussian"):
            density_ratio_critic(DatasetSpec(kind="shared_latent_views"))

    def test_matches_scalar_log_density_ratio(self):
        spec = DatasetSpec(rho=0.6, dim=3, seed=13)
        critic = density_ratio_critic(spec)
        batch = sample_batch(spec, 5, spec.rng())
        scores = critic(batch.xs, batch.ys)
        for i in range(5):
            for j in range(5):
                x, y = batch.xs[i], batch.ys[j]
                ref = 0.0
                for d in range(3):
                    cond = -0.5 * (y[d] - 0.6 * x[d]) ** 2 / (1 - 0.36) - 0.5 * np.log(
                        2 * np.pi * (1 - 0.36)
                    )
                    marg = -0.5 * y[d] ** 2 - 0.5 * np.log(2 * np.pi)
                    ref += cond - marg
                np.testing.assert_allclose(scores[i, j], ref, rtol=1e-10, atol=1e-12)

    def test_joint_expectation_recovers_mi(self):
        # E_{p(x,y)}[log p(y|x) - log p(y)] is the mutual information.
        spec = DatasetSpec(rho=0.8, dim=1, seed=17)
        critic = density_ratio_critic(spec)
        batch = sample_batch(spec, 100_000, spec.rng())
        diag = np.array(
            [critic(batch.xs[i : i + 1], batch.ys[i : i + 1])[0, 0] for i in range(0, 100_000, 10)]
        )
        stderr = diag.std(ddof=1) / np.sqrt(diag.size)
        assert abs(diag.mean() - true_mi(spec)) < 3 * stderr + 1e-12


class TestExchangeability:
    def test_row_permutation_permutes_row_quantities(self):
        from flatnce.critics import score_matrix
        from flatnce.estimators import flatnce, infonce

        spec = DatasetSpec(rho=0.7, dim=2, seed=19)
        critic = density_ratio_critic(spec)
        batch = sample_batch(spec, 12, spec.rng())
        perm = np.random.default_rng(0).permutation(12)
        base = critic(batch.xs, batch.ys)
        permuted = critic(batch.xs[perm], batch.ys[perm])
        np.testing.assert_array_equal(permuted, base[np.ix_(perm, perm)])
        for est in (infonce, flatnce):
            a = est(score_matrix(base))
            b = est(score_matrix(permuted))
            np.testing.assert_allclose(b.loss_value, a.loss_value, rtol=1e-12)
            np.testing.assert_allclose(b.mi_estimate, a.mi_estimate, rtol=1e-12)
            np.testing.assert_allclose(b.row_ess, a.row_ess[perm], rtol=1e-12)
