"""Penalized precision estimation: closed forms, optimality, and targets."""
from __future__ import annotations

import numpy as np
import pytest

from fedzsl.dataset import AttributeMatrix
from fedzsl.glasso import (
    DistillTargets,
    GlassoConfig,
    GlassoError,
    SimilarityMatrix,
    distill_targets,
    glasso_objective,
    graphical_lasso,
    sample_covariance,
)

TIGHT = GlassoConfig(delta=0.1, tol=1e-9, max_sweeps=500)


def correlated_2x2(rho: float) -> np.ndarray:
    return np.array([[1.0, rho], [rho, 1.0]])


class TestSampleCovariance:
    def test_identity_columns_unstandardized(self):
        # Two classes observed over two attribute dimensions.
        values = np.array([[1.0, 0.0], [0.0, 1.0]])
        S = sample_covariance(values, standardize=False)
        assert np.allclose(S, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)

    def test_standardized_diagonal_is_one(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((12, 6))
        S = sample_covariance(values, standardize=True)
        assert np.allclose(np.diag(S), 1.0, atol=1e-12)
        assert np.allclose(S, S.T, atol=1e-15)

    def test_standardized_equals_correlation(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((20, 4))
        S = sample_covariance(values, standardize=True)
        expected = np.corrcoef(values, rowvar=False)
        assert np.allclose(S, expected, atol=1e-12)

    def test_constant_column_yields_zero_row(self):
        values = np.column_stack([np.ones(5), np.arange(5.0)])
        S = sample_covariance(values, standardize=True)
        assert np.allclose(S[0], 0.0, atol=1e-15)
        assert S[1, 1] == pytest.approx(1.0)

    def test_accepts_attribute_matrix(self):
        attrs = AttributeMatrix(values=np.eye(3), groups=((0, 3),))
        S = sample_covariance(attrs, standardize=False)
        assert S.shape == (3, 3)

    def test_needs_two_observations(self):
        with pytest.raises(GlassoError):
            sample_covariance(np.ones((1, 4)))


class TestGraphicalLassoClosedForm:
    def test_strong_edge_survives(self):
        # With every entry penalized, the optimum has gamma_ii = S_ii + delta
        # and the off-diagonal shrunk toward S by exactly delta.
        sim = graphical_lasso(correlated_2x2(0.8), TIGHT)
        expected_gamma = np.array([[1.1, 0.7], [0.7, 1.1]])
        expected_theta = np.array([[1.1, -0.7], [-0.7, 1.1]]) / 0.72
        assert np.allclose(sim.gamma, expected_gamma, atol=1e-6)
        assert np.allclose(sim.theta, expected_theta, atol=1e-6)
        assert sim.converged

    def test_weak_edge_is_pruned(self):
        sim = graphical_lasso(correlated_2x2(0.05), TIGHT)
        assert sim.theta[0, 1] == pytest.approx(0.0, abs=1e-9)
        assert np.allclose(sim.gamma, np.diag([1.1, 1.1]), atol=1e-6)

    def test_diagonal_input_stays_diagonal(self):
        sim = graphical_lasso(np.diag([2.0, 3.0]), TIGHT)
        assert np.allclose(sim.gamma, np.diag([2.1, 3.1]), atol=1e-6)
        assert np.allclose(sim.theta, np.diag([1 / 2.1, 1 / 3.1]), atol=1e-6)

    def test_single_class_shortcut(self):
        sim = graphical_lasso(np.array([[4.0]]), GlassoConfig(delta=0.5))
        assert sim.gamma[0, 0] == pytest.approx(4.5)
        assert sim.theta[0, 0] == pytest.approx(1 / 4.5)


class TestGraphicalLassoOptimality:
    def test_matches_scipy_direct_minimization(self):
        # Independent oracle: minimize the same objective over the three free
        # entries of a symmetric 2x2 precision matrix.
        optimize = pytest.importorskip("scipy.optimize")
        S = correlated_2x2(0.8)
        delta = 0.1

        def objective(x: np.ndarray) -> float:
            theta = np.array([[x[0], x[1]], [x[1], x[2]]])
            if x[0] <= 0.0 or x[0] * x[2] - x[1] * x[1] <= 0.0:
                return 1e9
            return glasso_objective(S, theta, delta)

        result = optimize.minimize(
            objective,
            x0=np.array([1.0, 0.0, 1.0]),
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 50_000, "maxfev": 50_000},
        )
        sim = graphical_lasso(S, TIGHT)
        oracle_theta = np.array(
            [[result.x[0], result.x[1]], [result.x[1], result.x[2]]]
        )
        assert np.allclose(sim.theta, oracle_theta, atol=1e-5)
        assert glasso_objective(S, sim.theta, delta) <= result.fun + 1e-9

    def test_kkt_conditions_on_random_instance(self):
        rng = np.random.default_rng(7)
        raw = rng.standard_normal((30, 5))
        S = sample_covariance(raw, standardize=True)
        delta = 0.12
        sim = graphical_lasso(S, GlassoConfig(delta=delta, tol=1e-9, max_sweeps=500))
        assert sim.converged
        # Stationarity: gamma_ii = S_ii + delta, |S_ij - gamma_ij| <= delta,
        # with equality wherever theta_ij != 0.
        assert np.allclose(np.diag(sim.gamma), np.diag(S) + delta, atol=1e-7)
        off = ~np.eye(5, dtype=bool)
        residual = np.abs(S - sim.gamma)[off]
        assert np.all(residual <= delta + 1e-7)
        active = np.abs(sim.theta[off]) > 1e-7
        assert np.all(np.abs(residual[active] - delta) <= 1e-6)

    def test_objective_is_monotone_nonincreasing(self):
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((16, 8))
        S = sample_covariance(raw, standardize=True)
        sim = graphical_lasso(S, GlassoConfig(delta=0.05, tol=1e-8, max_sweeps=300))
        values = np.array(sim.objective)
        assert values.size == sim.sweeps + 1
        assert np.all(np.diff(values) <= 1e-10)

    def test_gamma_theta_inverse_pair(self):
        rng = np.random.default_rng(5)
        S = sample_covariance(rng.standard_normal((10, 6)), standardize=True)
        sim = graphical_lasso(S, GlassoConfig(delta=0.05))
        identity = sim.gamma @ sim.theta
        assert np.max(np.abs(identity - np.eye(6))) <= 1e-6

    def test_sweep_cap_flags_non_convergence(self):
        cfg = GlassoConfig(delta=0.1, tol=1e-12, max_sweeps=1)
        sim = graphical_lasso(correlated_2x2(0.8), cfg)
        assert not sim.converged
        assert sim.sweeps == 1


class TestGraphicalLassoValidation:
    def test_rejects_non_symmetric(self):
        with pytest.raises(GlassoError):
            graphical_lasso(np.array([[1.0, 0.2], [0.3, 1.0]]))

    def test_rejects_indefinite_start(self):
        S = np.array([[1.0, -2.0], [-2.0, 1.0]])
        with pytest.raises(GlassoError):
            graphical_lasso(S, GlassoConfig(delta=0.1))

    def test_rejects_negative_diagonal(self):
        with pytest.raises(GlassoError):
            graphical_lasso(np.array([[-1.0, 0.0], [0.0, 1.0]]))

    def test_rejects_bad_config(self):
        with pytest.raises(GlassoError):
            GlassoConfig(delta=0.0)
        with pytest.raises(GlassoError):
            GlassoConfig(tol=-1.0)
        with pytest.raises(GlassoError):
            GlassoConfig(max_sweeps=0)

    def test_similarity_matrix_must_invert(self):
        with pytest.raises(GlassoError):
            SimilarityMatrix(
                gamma=np.eye(2) * 2.0, theta=np.eye(2) * 2.0, sample_cov=np.eye(2)
            )

    def test_similarity_matrix_needs_pd_theta(self):
        with pytest.raises(GlassoError):
            SimilarityMatrix(
                gamma=-np.eye(2), theta=-np.eye(2), sample_cov=np.eye(2)
            )


class TestDistillTargets:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        gamma = rng.standard_normal((7, 7))
        targets = distill_targets(gamma, tau=4.0)
        assert np.allclose(targets.probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(targets.probs >= 0.0)

    def test_peak_follows_the_similarity_row(self):
        gamma = np.array([[3.0, 0.0, 1.0], [0.0, 2.0, 0.5], [1.0, 0.5, 4.0]])
        targets = distill_targets(gamma, tau=1.0)
        assert np.array_equal(np.argmax(targets.probs, axis=1), np.array([0, 1, 2]))

    def test_larger_tau_flattens(self):
        gamma = np.array([[3.0, 0.0], [0.0, 3.0]])
        sharp = distill_targets(gamma, tau=0.5).probs
        flat = distill_targets(gamma, tau=50.0).probs
        assert sharp.max() > flat.max()
        assert abs(flat[0, 0] - 0.5) < 0.02

    def test_stable_under_large_entries(self):
        gamma = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        targets = distill_targets(gamma, tau=1.0)
        assert np.all(np.isfinite(targets.probs))

    def test_rejects_bad_tau(self):
        with pytest.raises(GlassoError):
            distill_targets(np.eye(2), tau=0.0)

    def test_target_rows_validated(self):
        with pytest.raises(GlassoError):
            DistillTargets(probs=np.array([[0.7, 0.2]]), tau=1.0)
        with pytest.raises(GlassoError):
            DistillTargets(probs=np.array([[1.2, -0.2]]), tau=1.0)
