"""Estimator tests: frozen example values, brute-force oracles, gradient
identities, and finite-difference validation of every objective.

For the self-normalized objectives the forward loss is identically 1, so
finite differences are taken on the capture-free surrogate (the mean
log-sum-exp of contrasts), which is what their gradient optimizes.
"""

import numpy as np
import pytest

from flatnce import autodiff as ad
from flatnce.critics import ScoreMatrix, score_matrix
from flatnce.data import DatasetSpec, density_ratio_critic, true_mi
from flatnce.estimators import (
    ESTIMATOR_TAGS,
    EstimatorKind,
    dv,
    estimate,
    evaluate_large_k,
    flatnce,
    flatnce_plus,
    flo,
    holder_flatnce,
    infonce,
    infonce_naive,
    infonce_mi_value,
    nwj,
    optimal_dual,
)

# ---------------------------------------------------------------- oracles


def lse(v):
    m = v.max(axis=1, keepdims=True)
    return m + np.log(np.exp(v - m).sum(axis=1, keepdims=True))


def contrasts(s):
    return s - np.diagonal(s)[:, None]


def offdiag(s):
    k = s.shape[0]
    return s[~np.eye(k, dtype=bool)].reshape(k, k - 1)


def oracle_infonce_loss(s):
    return float(lse(contrasts(s)).mean())


def oracle_flatnce_surrogate(s):
    return float(lse(offdiag(contrasts(s))).mean())


def oracle_flatnce_plus_surrogate(s):
    return oracle_infonce_loss(s)


def oracle_holder_surrogate(s, gamma):
    k = s.shape[0]
    per_row = (lse(gamma * offdiag(contrasts(s))) - np.log(k - 1)) / gamma
    return float(per_row.mean())


def oracle_dv_loss(s):
    k = s.shape[0]
    total, count = 0.0, 0
    for i in range(k):
        for j in range(k):
            if i != j:
                total += np.exp(s[i, j])
                count += 1
    return -(float(np.diagonal(s).mean()) - np.log(total / count))


def oracle_nwj_loss(s):
    k = s.shape[0]
    acc = [np.exp(s[i, j] - 1.0) for i in range(k) for j in range(k) if i != j]
    return -(float(np.diagonal(s).mean()) - float(np.mean(acc)))


def oracle_flo_loss(s, u):
    k = s.shape[0]
    u = np.asarray(u).ravel()
    total = 0.0
    for i in range(k):
        m = np.mean([np.exp(s[i, j] - s[i, i]) for j in range(k) if j != i])
        total += u[i] + np.exp(-u[i]) * m
    return total / k - 1.0


def loss_and_grad(fn, s, *args):
    node = ad.parameter(s)
    out = fn(ScoreMatrix(node), *args)
    ad.backward(out.loss)
    return out, node.grad


# ------------------------------------------------------------- examples


class TestInfonce:
    def test_uniform_scores_give_zero_mi(self):
        for k in (2, 5, 16):
            out = infonce(score_matrix(np.full((k, k), 1.7)))
            assert abs(out.mi_estimate) < 1e-12
            np.testing.assert_allclose(out.loss_value, np.log(k), rtol=1e-14)

    def test_k2_frozen_value(self):
        s = np.array([[np.log(2.0), 0.0], [0.0, np.log(2.0)]])
        out = infonce(score_matrix(s))
        np.testing.assert_allclose(out.mi_estimate, np.log(4.0 / 3.0), rtol=1e-12)

    def test_dominant_diagonal_saturates_at_log_k(self):
        for k in (2, 8, 128):
            s = np.zeros((k, k))
            np.fill_diagonal(s, 50.0)
            out = infonce(score_matrix(s))
            assert out.mi_estimate <= np.log(k) + 1e-12
            np.testing.assert_allclose(out.mi_estimate, np.log(k), atol=1e-10)

    def test_log_k_ceiling_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(2, 20))
            s = rng.uniform(-5, 5, size=(k, k))
            out = infonce(score_matrix(s))
            assert out.mi_estimate <= np.log(k) + 1e-12

    def test_matches_oracle_loss(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(-3, 3, size=(7, 7))
        out = infonce(score_matrix(s))
        np.testing.assert_allclose(out.loss_value, oracle_infonce_loss(s), rtol=1e-13)

    def test_naive_form_agrees_in_float64(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = rng.uniform(-4, 4, size=(6, 6))
            a, ga = loss_and_grad(infonce, s)
            b, gb = loss_and_grad(infonce_naive, s)
            np.testing.assert_allclose(a.loss_value, b.loss_value, atol=1e-12)
            np.testing.assert_allclose(ga, gb, atol=1e-12)

    def test_small_k_rejected(self):
        with pytest.raises(ValueError, match="K >= 2"):
            infonce(score_matrix(np.zeros((1, 1))))


class TestFlatnce:
    def test_loss_is_exactly_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            k = int(rng.integers(2, 12))
            s = rng.uniform(-1e3, 1e3, size=(k, k))
            assert flatnce(score_matrix(s)).loss_value == 1.0

    def test_uniform_scores_k5(self):
        out = flatnce(score_matrix(np.zeros((5, 5))))
        np.testing.assert_allclose(out.mi_estimate, 0.0, atol=1e-15)
        # negatives-only pool: c_i = log 4
        np.testing.assert_allclose(oracle_flatnce_surrogate(np.zeros((5, 5))), np.log(4.0))

    def test_k2_gradient_is_plus_minus_one_per_row(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(-2, 2, size=(2, 2))
        _, grad = loss_and_grad(flatnce, s)
        np.testing.assert_allclose(2.0 * grad, [[-1.0, 1.0], [1.0, -1.0]], atol=1e-12)
        fd = ad.finite_difference_grad(lambda ps: oracle_flatnce_surrogate(ps[0]), [s])[0]
        np.testing.assert_allclose(grad, fd, atol=1e-9)

    def test_row_gradient_is_weights_minus_one_hot(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            k = int(rng.integers(2, 10))
            s = rng.uniform(-3, 3, size=(k, k))
            out, grad = loss_and_grad(flatnce, s)
            per_row = k * grad
            mask = ~np.eye(k, dtype=bool)
            np.testing.assert_allclose(per_row[mask].reshape(k, k - 1), out.row_weights, atol=1e-10)
            np.testing.assert_allclose(np.diagonal(per_row), -1.0, atol=1e-10)

    def test_monitor_value(self):
        rng = np.random.default_rng(6)
        s = rng.uniform(-2, 2, size=(6, 6))
        out = flatnce(score_matrix(s))
        np.testing.assert_allclose(
            out.mi_estimate, np.log(5.0) - oracle_flatnce_surrogate(s), rtol=1e-12
        )


class TestFlatncePlus:
    def test_loss_is_exactly_one(self):
        rng = np.random.default_rng(7)
        s = rng.uniform(-900, 900, size=(8, 8))
        assert flatnce_plus(score_matrix(s)).loss_value == 1.0

    def test_uniform_pool_includes_positive(self):
        s = np.zeros((4, 4))
        np.testing.assert_allclose(oracle_flatnce_plus_surrogate(s), np.log(4.0))

    def test_gradient_equals_infonce_gradient(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            k = int(rng.integers(2, 16))
            s = rng.uniform(-3, 3, size=(k, k))
            _, g_plus = loss_and_grad(flatnce_plus, s)
            _, g_nce = loss_and_grad(infonce, s)
            assert np.abs(g_plus - g_nce).max() < 1e-9

    def test_mi_monitor_equals_infonce_estimate(self):
        rng = np.random.default_rng(9)
        s = rng.uniform(-2, 2, size=(5, 5))
        np.testing.assert_allclose(
            flatnce_plus(score_matrix(s)).mi_estimate,
            infonce(score_matrix(s)).mi_estimate,
            rtol=1e-12,
        )


class TestHolderFlatnce:
    def test_gamma_one_matches_flatnce(self):
        rng = np.random.default_rng(10)
        s = rng.uniform(-3, 3, size=(6, 6))
        _, g_holder = loss_and_grad(holder_flatnce, s, 1.0)
        _, g_flat = loss_and_grad(flatnce, s)
        np.testing.assert_allclose(g_holder, g_flat, atol=1e-12)

    def test_gamma_scaling_identity(self):
        # gradient of the gamma-pooled objective = (1/gamma) * gradient of
        # the plain objective applied to gamma-scaled scores
        rng = np.random.default_rng(11)
        for gamma in (-2.0, 0.5, 2.0, 25.0):
            s = rng.uniform(-3, 3, size=(6, 6))
            _, g_holder = loss_and_grad(holder_flatnce, s, gamma)
            node = ad.parameter(s)
            out = flatnce(ScoreMatrix(ad.scale(node, gamma)))
            ad.backward(out.loss)
            np.testing.assert_allclose(g_holder, node.grad / gamma, atol=1e-9)

    def test_large_gamma_approaches_max_pooling(self):
        s = np.zeros((4, 4))
        s[0, 2] = 3.0  # dominant negative in row 0
        s[1, 3] = 1.0
        out = holder_flatnce(score_matrix(s), gamma=25.0)
        assert out.row_weights[0].max() > 0.999
        assert np.argmax(out.row_weights[0]) == 1  # column 2 is offdiag slot 1 in row 0

    def test_zero_gamma_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            holder_flatnce(score_matrix(np.zeros((3, 3))), gamma=0.0)
        with pytest.raises(ValueError, match="nonzero"):
            EstimatorKind(tag="holder_flatnce", gamma=0.0)

    def test_loss_is_one_even_for_extreme_gamma(self):
        rng = np.random.default_rng(12)
        s = rng.uniform(-50, 50, size=(5, 5))
        for gamma in (-10.0, 0.1, 30.0):
            assert holder_flatnce(score_matrix(s), gamma).loss_value == 1.0


class TestDv:
    def test_zeros(self):
        out = dv(score_matrix(np.zeros((4, 4))))
        np.testing.assert_allclose(out.mi_estimate, 0.0, atol=1e-14)

    def test_unit_diagonal(self):
        s = np.zeros((5, 5))
        np.fill_diagonal(s, 1.0)
        out = dv(score_matrix(s))
        np.testing.assert_allclose(out.mi_estimate, 1.0, rtol=1e-13)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            s = rng.uniform(-2, 2, size=(4, 4))
            out = dv(score_matrix(s))
            np.testing.assert_allclose(out.loss_value, oracle_dv_loss(s), rtol=1e-12)


class TestNwj:
    def test_zeros(self):
        out = nwj(score_matrix(np.zeros((4, 4))))
        np.testing.assert_allclose(out.mi_estimate, -np.exp(-1.0), rtol=1e-14)

    def test_ones(self):
        out = nwj(score_matrix(np.ones((4, 4))))
        np.testing.assert_allclose(out.mi_estimate, 0.0, atol=1e-14)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            s = rng.uniform(-2, 2, size=(4, 4))
            out = nwj(score_matrix(s))
            np.testing.assert_allclose(out.loss_value, oracle_nwj_loss(s), rtol=1e-12)


class TestFlo:
    def test_equality_at_optimal_dual(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            k = int(rng.integers(2, 10))
            s = rng.uniform(-3, 3, size=(k, k))
            sm = score_matrix(s)
            u_star = optimal_dual(sm)
            out = flo(sm, u_star)
            np.testing.assert_allclose(out.mi_estimate, -u_star.mean(), rtol=0, atol=1e-12)

    def test_any_other_dual_is_strictly_smaller(self):
        rng = np.random.default_rng(16)
        s = rng.uniform(-2, 2, size=(6, 6))
        sm = score_matrix(s)
        u_star = optimal_dual(sm)
        best = flo(sm, u_star).mi_estimate
        for _ in range(20):
            u = u_star + rng.uniform(-1, 1, size=u_star.shape)
            if np.allclose(u, u_star):
                continue
            assert flo(sm, u).mi_estimate < best

    def test_zero_dual_zero_scores(self):
        out = flo(score_matrix(np.zeros((4, 4))), np.zeros(4))
        np.testing.assert_allclose(out.mi_estimate, 0.0, atol=1e-14)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        s = rng.uniform(-2, 2, size=(5, 5))
        u = rng.uniform(-1, 1, size=5)
        out = flo(score_matrix(s), u)
        np.testing.assert_allclose(out.loss_value, oracle_flo_loss(s, u), rtol=1e-12)

    def test_bad_dual_rejected(self):
        sm = score_matrix(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="finite"):
            flo(sm, np.array([0.0, np.inf, 0.0]))
        with pytest.raises(ValueError, match="shape"):
            flo(sm, np.zeros(4))


# --------------------------------------------------- cross-cutting checks


def fd_reference(tag, gamma=None):
    """The scalar each estimator's gradient actually optimizes."""
    if tag in ("infonce", "infonce_naive", "flatnce_plus"):
        return oracle_infonce_loss
    if tag == "flatnce":
        return oracle_flatnce_surrogate
    if tag == "holder_flatnce":
        return lambda s: oracle_holder_surrogate(s, gamma)
    if tag == "dv":
        return oracle_dv_loss
    if tag == "nwj":
        return oracle_nwj_loss
    raise KeyError(tag)


class TestGradientsAgainstFiniteDifferences:
    @pytest.mark.parametrize("tag", [t for t in ESTIMATOR_TAGS if t != "flo"])
    def test_score_gradient(self, tag):
        rng = np.random.default_rng(hash(tag) % 2**32)
        gamma = 2.0 if tag == "holder_flatnce" else None
        kind = EstimatorKind(tag=tag, gamma=gamma)
        ref = fd_reference(tag, gamma)
        for _ in range(5):
            k = int(rng.integers(2, 7))
            s = rng.uniform(-3, 3, size=(k, k))
            node = ad.parameter(s)
            out = estimate(kind, ScoreMatrix(node))
            ad.backward(out.loss)
            fd = ad.finite_difference_grad(lambda ps: ref(ps[0]), [s])[0]
            scale = max(np.abs(fd).max(), 1e-3)
            np.testing.assert_allclose(node.grad, fd, rtol=0, atol=1e-5 * scale)

    def test_flo_gradient_in_scores_and_dual(self):
        rng = np.random.default_rng(18)
        for _ in range(5):
            k = int(rng.integers(2, 7))
            s = rng.uniform(-2, 2, size=(k, k))
            u = rng.uniform(-1, 1, size=(k, 1))
            s_node = ad.parameter(s)
            u_node = ad.parameter(u)
            out = flo(ScoreMatrix(s_node), u_node)
            ad.backward(out.loss)
            fd_s = ad.finite_difference_grad(lambda ps: oracle_flo_loss(ps[0], u), [s])[0]
            fd_u = ad.finite_difference_grad(lambda ps: oracle_flo_loss(s, ps[0]), [u])[0]
            np.testing.assert_allclose(s_node.grad, fd_s, atol=1e-7)
            np.testing.assert_allclose(u_node.grad, fd_u, atol=1e-7)


class TestOutputContracts:
    @pytest.mark.parametrize("tag", ESTIMATOR_TAGS)
    def test_weights_are_row_simplex_and_ess_in_bounds(self, tag):
        rng = np.random.default_rng(19)
        gamma = -1.5 if tag == "holder_flatnce" else None
        kind = EstimatorKind(tag=tag, gamma=gamma)
        for _ in range(10):
            k = int(rng.integers(2, 12))
            s = rng.uniform(-4, 4, size=(k, k))
            out = estimate(kind, score_matrix(s))
            np.testing.assert_allclose(out.row_weights.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(out.row_weights >= 0)
            n = out.row_weights.shape[1]
            assert out.row_ess.shape == (k,)
            assert np.all(out.row_ess >= 1.0 / n)
            assert np.all(out.row_ess <= 1.0)

    def test_estimator_kind_validation(self):
        with pytest.raises(ValueError, match="unknown estimator"):
            EstimatorKind(tag="mine")
        with pytest.raises(ValueError, match="gamma"):
            EstimatorKind(tag="holder_flatnce")


class TestEvaluateLargeK:
    def test_constant_critic_gives_zero(self):
        spec = DatasetSpec(rho=0.5, dim=1, seed=0)
        est = evaluate_large_k(lambda xs, ys: np.ones((len(xs), len(xs))), spec, 512, batches=2)
        assert abs(est) < 1e-12

    def test_degenerate_pool_respects_ceiling(self):
        spec = DatasetSpec(rho=0.9, dim=1, seed=1)
        critic = density_ratio_critic(spec)
        est = evaluate_large_k(critic, spec, 2, batches=200)
        assert est <= np.log(2.0)

    def test_oracle_critic_recovers_mi(self):
        spec = DatasetSpec(rho=0.9, dim=1, seed=2)
        critic = density_ratio_critic(spec)
        est = evaluate_large_k(critic, spec, 4096, batches=10)
        assert abs(est - true_mi(spec)) < 0.05

    def test_bad_args_rejected(self):
        spec = DatasetSpec(rho=0.5)
        with pytest.raises(ValueError, match="k_eval"):
            evaluate_large_k(lambda x, y: np.zeros((2, 2)), spec, 1)
        with pytest.raises(ValueError, match="batches"):
            evaluate_large_k(lambda x, y: np.zeros((2, 2)), spec, 4, batches=0)

    def test_mi_value_helper_matches_estimator(self):
        rng = np.random.default_rng(20)
        s = rng.uniform(-3, 3, size=(9, 9))
        np.testing.assert_allclose(
            infonce_mi_value(s), infonce(score_matrix(s)).mi_estimate, rtol=1e-13
        )
