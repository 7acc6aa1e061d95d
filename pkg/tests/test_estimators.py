#!/usr/bin/env python3
"""
Tests de los estimadores
========================
- Solver ponderado por pérdida (forma cerrada, QR pivotado, Newton, cuantil)
- Equivalencia con ajustes clásicos y con duplicación de unidades
- Componentes theta^II, gamma^II, gamma^I
- Combinación MPD y Omega óptima

Ejecutar: python -m pytest tests/test_estimators.py -v
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from engines.estimation_engine import (
    ComponentEstimates,
    estimate_mpd,
    fit_components,
    fit_weighted_m,
    optimal_tuning,
    ptd_combine,
    resolve_tuning,
    solve_weighted_m,
)
from engines.sampling_engine import FeatureLayout, ObservedStudy, StudyDesign, run_wave
from modules.errors import (
    ConfigurationError,
    InsufficientDataError,
    NonConvergenceError,
    ProtocolError,
    RankDeficiencyError,
    SingularHessianError,
)
from modules.inference import CovarianceComponents, TuningMatrix, TuningMode, mpd_covariance
from modules.losses import build_loss
from modules.strategies import ConstantRule

NAMES = ["y", "z1", "z2"]


def _regression_data(n=300, seed=0, binary=False):
    rng = np.random.default_rng(seed)
    z1, z2 = rng.normal(size=n), rng.normal(size=n)
    eta = 0.3 + z1 - 0.5 * z2
    if binary:
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    else:
        y = eta + rng.normal(size=n)
    return np.column_stack([y, z1, z2])


def _classical_logistic(X):
    y, Z = X[:, 0], np.column_stack([np.ones(len(X)), X[:, 1:]])
    beta = np.zeros(Z.shape[1])
    for _ in range(50):
        p = 1.0 / (1.0 + np.exp(-Z @ beta))
        gradient = Z.T @ (p - y)
        hessian = (Z * (p * (1 - p))[:, None]).T @ Z
        beta = beta - np.linalg.solve(hessian, gradient)
    return beta


def _scalar_components(H_theta, S12, S13, S22, S33, H_gamma, S11=1.0):
    m = lambda v: np.array([[float(v)]])  # noqa: E731
    return CovarianceComponents(S11=m(S11), S12=m(S12), S22=m(S22), S13=m(S13), S33=m(S33),
                                H_theta=m(H_theta), H_gamma=m(H_gamma))


class TestSolver:
    """solve_weighted_m / fit_weighted_m."""

    def test_linear_exact_line(self):
        loss = build_loss("linear_regression", ["y", "x"], "y", ["x"])
        x = np.linspace(-2, 3, 11)
        theta = solve_weighted_m(loss, np.column_stack([2 * x, x]), np.ones(11))
        assert np.allclose(theta, [0.0, 2.0], rtol=0, atol=1e-10)

    def test_linear_matches_least_squares(self):
        loss = build_loss("linear_regression", NAMES, "y", ["z1", "z2"])
        X = _regression_data(seed=1)
        Z = np.column_stack([np.ones(len(X)), X[:, 1:]])
        expected = np.linalg.lstsq(Z, X[:, 0], rcond=None)[0]
        assert np.allclose(solve_weighted_m(loss, X, np.ones(len(X))), expected, rtol=0, atol=1e-8)

    def test_logistic_matches_classical(self):
        loss = build_loss("logistic_regression", NAMES, "y", ["z1", "z2"])
        X = _regression_data(seed=2, binary=True)
        theta = solve_weighted_m(loss, X, np.ones(len(X)))
        assert np.allclose(theta, _classical_logistic(X), rtol=0, atol=1e-6)

    def test_mean_and_quantile_weight_one(self):
        values = np.random.default_rng(3).normal(size=(101, 1))
        mean = solve_weighted_m(build_loss("mean", ["x"], "x"), values, np.ones(101))
        q = solve_weighted_m(build_loss("quantile", ["x"], "x", tau=0.75), values, np.ones(101))
        assert mean[0] == pytest.approx(values.mean(), abs=1e-12)
        # menor valor con F_n(q) >= 0.75: estadístico de orden ceil(0.75 * 101) = 76
        assert q[0] == np.sort(values[:, 0])[75]

    def test_quantile_on_integers(self):
        loss = build_loss("quantile", ["x"], "x", tau=0.75)
        values = np.arange(1, 101, dtype=float)[:, None]
        assert solve_weighted_m(loss, values, np.ones(100))[0] == 75.0

    @pytest.mark.parametrize("kind", ["linear_regression", "logistic_regression"])
    def test_integer_weight_equals_duplication(self, kind):
        loss = build_loss(kind, NAMES, "y", ["z1", "z2"])
        X = _regression_data(n=120, seed=4, binary=kind == "logistic_regression")
        weights = np.ones(len(X))
        weights[:10] = 2.0
        duplicated = np.vstack([X, X[:10]])

        weighted = solve_weighted_m(loss, X, weights, tol=1e-12)
        replicated = solve_weighted_m(loss, duplicated, np.ones(len(duplicated)), tol=1e-12)
        assert np.allclose(weighted, replicated, rtol=0, atol=1e-8)

    @pytest.mark.parametrize("kind", ["mean", "quantile", "linear_regression", "logistic_regression"])
    def test_weight_scaling_invariance(self, kind):
        covariates = ["z1", "z2"] if kind.endswith("regression") else []
        loss = build_loss(kind, NAMES, "y", covariates)
        X = _regression_data(n=150, seed=5, binary=kind == "logistic_regression")
        weights = np.random.default_rng(6).uniform(0.5, 3.0, size=len(X))

        base = solve_weighted_m(loss, X, weights, tol=1e-12)
        scaled = solve_weighted_m(loss, X, 3.7 * weights, tol=1e-12)
        assert np.allclose(base, scaled, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("kind", ["mean", "linear_regression", "logistic_regression"])
    def test_score_equation_holds(self, kind):
        covariates = ["z1", "z2"] if kind.endswith("regression") else []
        loss = build_loss(kind, NAMES, "y", covariates)
        X = _regression_data(n=200, seed=7, binary=kind == "logistic_regression")
        weights = np.random.default_rng(8).uniform(0.0, 2.0, size=len(X))

        fit = fit_weighted_m(loss, X, weights, normalizer=1000.0)
        assert fit.diagnostics.grad_norm <= 1e-8

    def test_logistic_mirrored_in_covariate_has_zero_slope(self):
        loss = build_loss("logistic_regression", ["y", "x"], "y", ["x"])
        rng = np.random.default_rng(9)
        x = rng.normal(size=50)
        y = (rng.random(50) < 0.4).astype(float)
        X = np.vstack([np.column_stack([y, x]), np.column_stack([y, -x])])

        theta = solve_weighted_m(loss, X, np.ones(100))
        assert abs(theta[1]) <= 1e-8

    def test_logistic_mirrored_in_both_has_zero_intercept(self):
        loss = build_loss("logistic_regression", ["y", "x"], "y", ["x"])
        rng = np.random.default_rng(10)
        x = rng.normal(size=50)
        y = (rng.random(50) < 1.0 / (1.0 + np.exp(-x))).astype(float)
        X = np.vstack([np.column_stack([y, x]), np.column_stack([1 - y, -x])])

        theta = solve_weighted_m(loss, X, np.ones(100))
        assert abs(theta[0]) <= 1e-8

    def test_rank_deficiency(self):
        loss = build_loss("linear_regression", NAMES, "y", ["z1", "z2"])
        X = _regression_data(n=50, seed=11)
        X[:, 2] = 2.0 * X[:, 1]
        with pytest.raises(RankDeficiencyError):
            solve_weighted_m(loss, X, np.ones(50))

    def test_non_convergence_keeps_last_iterate(self):
        loss = build_loss("logistic_regression", NAMES, "y", ["z1", "z2"])
        X = _regression_data(seed=12, binary=True)
        with pytest.raises(NonConvergenceError) as excinfo:
            solve_weighted_m(loss, X, np.ones(len(X)), max_iter=1)
        assert excinfo.value.iterations == 1
        assert excinfo.value.last_iterate.shape == (3,)
        assert excinfo.value.code == "non_convergence"

    def test_invalid_weights(self):
        loss = build_loss("mean", ["x"], "x")
        with pytest.raises(ConfigurationError):
            solve_weighted_m(loss, np.ones((3, 1)), np.zeros(3))
        with pytest.raises(ConfigurationError):
            solve_weighted_m(loss, np.ones((3, 1)), np.array([1.0, -1.0, 1.0]))

    def test_row_order_irrelevant(self):
        loss = build_loss("logistic_regression", NAMES, "y", ["z1", "z2"])
        X = _regression_data(seed=13, binary=True)
        weights = np.random.default_rng(14).uniform(0.5, 2.0, size=len(X))
        perm = np.random.default_rng(15).permutation(len(X))

        a = solve_weighted_m(loss, X, weights)
        b = solve_weighted_m(loss, X[perm], weights[perm])
        assert a.tobytes() == b.tobytes()


class TestComponents:
    """theta^II, gamma^II y gamma^I sobre un estudio."""

    LAYOUT = FeatureLayout(cheap_names=("x_c",), expensive_names=("x_e",), proxy_names=("x_p",))

    def _study(self, N=400, seed=0, proxy_noise=0.5, p=0.3):
        rng = np.random.default_rng(seed)
        x_c = rng.normal(size=N)
        x_e = 1.0 + x_c + rng.normal(size=N)
        x_p = x_e + proxy_noise * rng.normal(size=N)
        design = StudyDesign.create(N=N, K=1, wave_budgets=[p * N], master_seed=seed)
        study = ObservedStudy.fresh(np.column_stack([x_c, x_p]), x_e, self.LAYOUT, design)
        return run_wave(study, 1, ConstantRule(p))

    def test_perfect_proxy_gives_equal_fits(self):
        loss = build_loss("linear_regression", ["x_c", "x_e"], "x_e", ["x_c"])
        components = fit_components(loss, self._study(proxy_noise=0.0))
        assert np.array_equal(components.gamma_II, components.theta_II)

    def test_phase_one_mean(self):
        loss = build_loss("mean", ["x_c", "x_e"], "x_e")
        study = self._study(seed=1)
        components = fit_components(loss, study)
        assert components.gamma_I[0] == pytest.approx(study.cheap[:, 1].mean(), abs=1e-12)

    def test_theta_is_weighted_mean_of_labels(self):
        loss = build_loss("mean", ["x_c", "x_e"], "x_e")
        study = self._study(seed=2)
        labelled = study.labelled_indices
        W = study.weights.aggregated[labelled]
        expected = np.dot(W, study.gold_matrix(labelled)[:, 1]) / W.sum()
        assert fit_components(loss, study).theta_II[0] == pytest.approx(expected, rel=1e-12)

    def test_diagnostics_recorded(self):
        loss = build_loss("linear_regression", ["x_c", "x_e"], "x_e", ["x_c"])
        components = fit_components(loss, self._study(seed=3))
        assert set(components.diagnostics) == {"theta_II", "gamma_II", "gamma_I"}
        assert all(diag.grad_norm <= 1e-8 for diag in components.diagnostics.values())

    def test_insufficient_labels(self):
        loss = build_loss("mean", ["x_c", "x_e"], "x_e")
        N = 20
        design = StudyDesign.create(N=N, K=1, wave_budgets=[2], b_targ=0.01)
        cheap = np.column_stack([np.arange(N, dtype=float), np.arange(N, dtype=float)])
        study = ObservedStudy.fresh(cheap, np.arange(N, dtype=float), self.LAYOUT, design)
        uniforms = np.ones(N)
        uniforms[0] = 0.0
        study = run_wave(study, 1, ConstantRule(0.1), uniforms=uniforms)

        with pytest.raises(InsufficientDataError):
            fit_components(loss, study)

    def test_incomplete_study(self):
        loss = build_loss("mean", ["x_c", "x_e"], "x_e")
        design = StudyDesign.create(N=50, K=2, wave_budgets=[10, 10])
        rng = np.random.default_rng(4)
        study = ObservedStudy.fresh(rng.normal(size=(50, 2)), rng.normal(size=50), self.LAYOUT, design)
        study = run_wave(study, 1, ConstantRule(0.2))
        with pytest.raises(ProtocolError):
            fit_components(loss, study)


class TestCombination:
    """theta^MPD = Omega gamma^I + (theta^II - Omega gamma^II)."""

    components = ComponentEstimates(
        theta_II=np.array([1.0, 2.0]),
        gamma_II=np.array([0.5, -1.0]),
        gamma_I=np.array([0.75, 0.25]),
    )

    def test_zero_tuning(self):
        result = ptd_combine(self.components, TuningMatrix.zero(2))
        assert np.array_equal(result, self.components.theta_II)

    def test_identity_tuning(self):
        c = self.components
        result = ptd_combine(c, TuningMatrix.identity(2))
        assert np.array_equal(result, c.gamma_I + c.theta_II - c.gamma_II)

    def test_equal_proxy_fits_cancel(self):
        c = ComponentEstimates(theta_II=np.array([1.0, 2.0]), gamma_II=np.array([0.3, 0.4]),
                               gamma_I=np.array([0.3, 0.4]))
        omega = np.array([[0.2, -1.3], [4.0, 0.7]])
        assert np.allclose(ptd_combine(c, omega), c.theta_II, rtol=0, atol=1e-15)


class TestOptimalTuning:
    """Omega_opt y modos de ajuste."""

    def test_scalar_example(self):
        cov = _scalar_components(H_theta=2, S12=3, S13=1, S22=4, S33=2, H_gamma=2)
        omega = optimal_tuning(cov, ridge=0.0)
        assert omega.mode == TuningMode.OPTIMAL
        assert omega.omega[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_equal_cross_terms_give_zero(self):
        cov = _scalar_components(H_theta=2, S12=1.5, S13=1.5, S22=4, S33=2, H_gamma=2)
        assert optimal_tuning(cov, ridge=0.0).omega[0, 0] == 0.0

    def test_default_ridge(self):
        cov = _scalar_components(H_theta=1, S12=1, S13=0, S22=3, S33=1, H_gamma=1)
        omega = optimal_tuning(cov)
        assert omega.ridge == pytest.approx(2e-8)

    def test_singular_hessian(self):
        cov = _scalar_components(H_theta=0, S12=1, S13=0, S22=3, S33=1, H_gamma=1)
        with pytest.raises(SingularHessianError):
            optimal_tuning(cov)

    def test_resolve_modes(self):
        cov = _scalar_components(H_theta=1, S12=1, S13=0, S22=3, S33=1, H_gamma=1)
        assert resolve_tuning("identity", cov).omega.tolist() == [[1.0]]
        assert resolve_tuning("zero", cov).omega.tolist() == [[0.0]]
        assert resolve_tuning("constant", cov, constant=[[0.4]]).omega.tolist() == [[0.4]]
        with pytest.raises(ConfigurationError):
            resolve_tuning("constant", cov)


class TestEstimateMPD:
    """Pipeline completo en casos degenerados."""

    LAYOUT = FeatureLayout(cheap_names=("z",), expensive_names=("y",), proxy_names=("y_hat",))

    def test_all_labelled_perfect_proxy_is_classical(self):
        rng = np.random.default_rng(20)
        N = 200
        z = rng.normal(size=N)
        y = 1.0 + 0.5 * z + rng.normal(size=N)
        study = ObservedStudy(cheap=np.column_stack([z, y]), _expensive=y[:, None], layout=self.LAYOUT,
                              precomputed_weights=np.ones(N))
        loss = build_loss("linear_regression", ["z", "y"], "y", ["z"])

        report = estimate_mpd(loss, study, tuning="identity")

        classical = solve_weighted_m(loss, np.column_stack([z, y]), np.ones(N))
        assert np.allclose(report.theta_mpd, classical, rtol=0, atol=1e-12)
        H = report.covariance.H_theta
        H_inv = np.linalg.inv(H)
        sandwich = H_inv @ report.covariance.S11 @ H_inv
        assert np.allclose(report.sigma.sigma, sandwich, rtol=0, atol=1e-10)

    def test_report_frame(self):
        rng = np.random.default_rng(21)
        N = 300
        z = rng.normal(size=N)
        y = 2.0 * z + rng.normal(size=N)
        y_hat = y + 0.3 * rng.normal(size=N)
        design = StudyDesign.create(N=N, K=1, wave_budgets=[120], master_seed=1)
        study = ObservedStudy.fresh(np.column_stack([z, y_hat]), y, self.LAYOUT, design)
        study = run_wave(study, 1, ConstantRule(0.4))
        loss = build_loss("linear_regression", ["z", "y"], "y", ["z"])

        report = estimate_mpd(loss, study, parameter_names=["intercept", "z"])
        frame = report.to_frame()

        assert frame["parameter"].tolist() == ["intercept", "z"]
        assert list(frame.columns)[:5] == ["parameter", "theta_mpd", "sigma_jj", "lower", "upper"]
        assert np.all(frame["lower"] <= frame["theta_mpd"])
        assert np.all(frame["theta_mpd"] <= frame["upper"])
        assert report.n_labelled == study.n_labelled

    def test_labelled_only_interval(self):
        rng = np.random.default_rng(22)
        N = 300
        z = rng.normal(size=N)
        y = 1.0 - z + rng.normal(size=N)
        y_hat = y + 0.5 * rng.normal(size=N)
        design = StudyDesign.create(N=N, K=1, wave_budgets=[150], master_seed=2)
        study = run_wave(ObservedStudy.fresh(np.column_stack([z, y_hat]), y, self.LAYOUT, design),
                         1, ConstantRule(0.5))
        loss = build_loss("linear_regression", ["z", "y"], "y", ["z"])

        report = estimate_mpd(loss, study)

        expected = mpd_covariance(report.covariance, TuningMatrix.zero(loss.d))
        assert np.allclose(report.labelled_only_sigma.sigma, expected.sigma, rtol=0, atol=1e-14)
        for j, ci in enumerate(report.labelled_only_intervals):
            assert np.isclose(0.5 * (ci.lower + ci.upper), report.components.theta_II[j], rtol=0, atol=1e-12)
            assert ci.lower < ci.upper
