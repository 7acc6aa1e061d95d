"""
Estimation Engine - M-estimación ponderada y estimador MPD
===========================================================
Resuelve la minimización de riesgo empírico ponderado y combina los tres
estimadores componentes:

    theta^II = argmin N^-1 sum W_i l_theta(X_i)      (etiquetadas)
    gamma^II = argmin N^-1 sum W_i l_theta(X~_i)     (etiquetadas, proxies)
    gamma^I  = argmin N^-1 sum l_theta(X~_i)         (toda la Fase I)

    theta^MPD = Omega gamma^I + (theta^II - Omega gamma^II)

Solvers por pérdida:
- mean: forma cerrada
- linear_regression: mínimos cuadrados ponderados con QR pivotado
- logistic_regression: Newton con reducción de paso, inicio en 0
- quantile: cuantil ponderado

Versión: 1.0
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from modules.errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientDataError,
    NonConvergenceError,
    RankDeficiencyError,
)
from modules.inference import (
    ConfidenceInterval,
    CovarianceComponents,
    MPDCovariance,
    TuningMatrix,
    TuningMode,
    confidence_interval,
    covariance_components,
    mpd_covariance,
    stable_inverse,
)
from modules.losses import LossKind, LossModel, weighted_quantile

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 40


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int
    grad_norm: float
    converged: bool = True


@dataclass(frozen=True)
class FitResult:
    theta: np.ndarray
    diagnostics: SolverDiagnostics


@dataclass(frozen=True)
class ComponentEstimates:
    """theta^II, gamma^II y gamma^I con el diagnóstico de cada ajuste."""
    theta_II: np.ndarray
    gamma_II: np.ndarray
    gamma_I: np.ndarray
    diagnostics: Dict[str, SolverDiagnostics] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.theta_II.shape[0]


# =============================================================================
# SOLVER
# =============================================================================

def canonical_order(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Orden de filas que sólo depende de los valores (no de la posición)."""
    keys = np.column_stack([X, weights])
    return np.lexsort(keys.T[::-1])


def score_norm(loss: LossModel, theta, X, weights, normalizer: float) -> float:
    """||normalizer^-1 sum w_i grad l_theta(x_i)||_inf."""
    score = (weights[:, None] * loss.gradients(theta, X)).sum(axis=0) / normalizer
    return float(np.abs(score).max())


def fit_weighted_m(loss: LossModel, X, weights, init=None, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER, normalizer: Optional[float] = None) -> FitResult:
    """
    Minimiza normalizer^-1 sum w_i l_theta(x_i).

    Args:
        loss: Pérdida
        X: Matriz n x p de variables
        weights: Pesos >= 0 (no todos nulos)
        init: Punto inicial (sólo logística)
        tol: Tolerancia sobre la norma infinito del score
        max_iter: Iteraciones máximas de Newton
        normalizer: Denominador del riesgo (por defecto n)

    Returns:
        FitResult con theta y diagnóstico

    Raises:
        RankDeficiencyError: Ecuaciones normales singulares
        NonConvergenceError: Newton sin converger (lleva la última iteración)
    """
    X = loss._check_features(X)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (X.shape[0],):
        raise DimensionMismatchError(f"{weights.size} pesos para {X.shape[0]} filas")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise ConfigurationError("los pesos deben ser >= 0 y no todos nulos")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("variables no finitas en el ajuste")
    normalizer = float(X.shape[0] if normalizer is None else normalizer)

    keep = weights > 0
    X, weights = X[keep], weights[keep]
    order = canonical_order(X, weights)
    X, weights = X[order], weights[order]

    if loss.kind == LossKind.MEAN:
        y = loss.response(X)
        theta = np.array([np.dot(weights, y) / weights.sum()])
        iterations = 0
    elif loss.kind == LossKind.QUANTILE:
        theta = np.array([weighted_quantile(loss.response(X), weights, loss.tau)])
        iterations = 0
    elif loss.kind == LossKind.LINEAR:
        theta = _weighted_least_squares(loss, X, weights)
        iterations = 0
    else:
        theta, iterations = _logistic_newton(loss, X, weights, init, tol, max_iter, normalizer)

    grad_norm = score_norm(loss, theta, X, weights, normalizer)
    return FitResult(theta, SolverDiagnostics(iterations=iterations, grad_norm=grad_norm))


def solve_weighted_m(loss: LossModel, X, weights, init=None, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, normalizer: Optional[float] = None) -> np.ndarray:
    """Igual que fit_weighted_m pero devuelve sólo theta."""
    return fit_weighted_m(loss, X, weights, init, tol, max_iter, normalizer).theta


def _weighted_least_squares(loss: LossModel, X, weights) -> np.ndarray:
    y, Z = loss.design(X)
    root = np.sqrt(weights)
    A = Z * root[:, None]
    b = y * root
    d = Z.shape[1]
    if A.shape[0] < d:
        raise RankDeficiencyError(f"{A.shape[0]} filas con peso para {d} coeficientes")

    Q, R, pivots = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > 1e-10 * diag[0]).sum()) if diag[0] > 0 else 0
    if rank < d:
        raise RankDeficiencyError(f"ecuaciones normales singulares (rango {rank} de {d})")

    theta = np.empty(d)
    theta[pivots] = linalg.solve_triangular(R, Q.T @ b)
    return theta


def _logistic_newton(loss: LossModel, X, weights, init, tol, max_iter, normalizer):
    d = loss.d
    theta = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()

    def objective(t):
        return float(np.dot(weights, loss.values(t, X)) / normalizer)

    current = objective(theta)
    for iteration in range(max_iter + 1):
        score = (weights[:, None] * loss.gradients(theta, X)).sum(axis=0) / normalizer
        if np.abs(score).max() <= tol:
            return theta, iteration
        if iteration == max_iter:
            break
        hessian = loss.weighted_hessian(theta, X, weights, normalizer=normalizer)
        try:
            step = linalg.solve(hessian, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as e:
            raise NonConvergenceError(
                f"Hessiano logístico singular en la iteración {iteration}: {e}",
                last_iterate=theta, iterations=iteration,
            )

        # Reducción de paso hasta que el objetivo no aumente
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = theta - scale * step
            value = objective(candidate)
            if value <= current:
                break
            scale *= 0.5
        else:
            raise NonConvergenceError(
                f"sin descenso tras {MAX_HALVINGS} reducciones de paso",
                last_iterate=theta, iterations=iteration,
            )
        theta, current = candidate, value

    raise NonConvergenceError(
        f"Newton logístico sin converger en {max_iter} iteraciones "
        f"(|score|={np.abs(score).max():.3g})",
        last_iterate=theta, iterations=max_iter,
    )


# =============================================================================
# COMPONENTES Y COMBINACIÓN
# =============================================================================

def fit_phase_one(loss: LossModel, study) -> FitResult:
    """gamma^I: ajuste no ponderado sobre las proxies de toda la Fase I."""
    X_proxy = study.proxy_matrix()
    return fit_weighted_m(loss, X_proxy, np.ones(study.N), normalizer=study.N)


def fit_components(loss: LossModel, study) -> ComponentEstimates:
    """
    Ajusta theta^II, gamma^II y gamma^I sobre un estudio completado.

    Raises:
        InsufficientDataError: Menos de d+1 unidades etiquetadas con peso
    """
    W = study.weights.aggregated
    labelled = study.labelled_indices
    labelled = labelled[W[labelled] > 0]
    if labelled.size < loss.d + 1:
        raise InsufficientDataError(
            f"{labelled.size} unidades etiquetadas con peso, se necesitan al menos {loss.d + 1}"
        )

    N = study.N
    X_gold = study.gold_matrix(labelled)
    X_proxy = study.proxy_matrix()

    theta_fit = fit_weighted_m(loss, X_gold, W[labelled], normalizer=N)
    gamma_II_fit = fit_weighted_m(loss, X_proxy[labelled], W[labelled], normalizer=N)
    gamma_I_fit = fit_phase_one(loss, study)

    return ComponentEstimates(
        theta_II=theta_fit.theta,
        gamma_II=gamma_II_fit.theta,
        gamma_I=gamma_I_fit.theta,
        diagnostics={
            "theta_II": theta_fit.diagnostics,
            "gamma_II": gamma_II_fit.diagnostics,
            "gamma_I": gamma_I_fit.diagnostics,
        },
    )


def ptd_combine(components: ComponentEstimates, omega) -> np.ndarray:
    """theta^MPD = Omega gamma^I + (theta^II - Omega gamma^II)."""
    O = omega.omega if isinstance(omega, TuningMatrix) else np.atleast_2d(np.asarray(omega, dtype=float))
    if O.shape != (components.d, components.d):
        raise DimensionMismatchError(f"Omega {O.shape} para d={components.d}")
    return O @ components.gamma_I + (components.theta_II - O @ components.gamma_II)


def default_ridge(cov: CovarianceComponents) -> float:
    """1e-8 * tr(S22 - S33) / d, con suelo 1e-12."""
    trace = float(np.trace(cov.S22 - cov.S33))
    return max(1e-8 * trace / cov.d, 1e-12)


def optimal_tuning(cov: CovarianceComponents, ridge: Optional[float] = None) -> TuningMatrix:
    """
    Omega_opt = H_theta^-1 (S12 - S13) (S22 - S33 + ridge I)^-1 H_gamma.

    Raises:
        SingularHessianError: H_theta o la matriz regularizada singulares
    """
    ridge = default_ridge(cov) if ridge is None else float(ridge)
    if ridge < 0:
        raise ConfigurationError(f"ridge debe ser >= 0: {ridge}")
    H_theta_inv = stable_inverse(cov.H_theta, "H_theta")
    stable_inverse(cov.H_gamma, "H_gamma")
    middle = stable_inverse(cov.S22 - cov.S33 + ridge * np.eye(cov.d), "S22 - S33")
    omega = H_theta_inv @ (cov.S12 - cov.S13) @ middle @ cov.H_gamma
    return TuningMatrix(omega, TuningMode.OPTIMAL, ridge=ridge)


def resolve_tuning(mode, cov: CovarianceComponents, constant=None,
                   ridge: Optional[float] = None) -> TuningMatrix:
    """Construye la Omega según el modo configurado."""
    mode = TuningMode(mode)
    if mode == TuningMode.IDENTITY:
        return TuningMatrix.identity(cov.d)
    if mode == TuningMode.ZERO:
        return TuningMatrix.zero(cov.d)
    if mode == TuningMode.OPTIMAL:
        return optimal_tuning(cov, ridge)
    if constant is None:
        raise ConfigurationError("el modo constant necesita una matriz omega")
    tuning = TuningMatrix(constant, TuningMode.CONSTANT)
    if tuning.d != cov.d:
        raise DimensionMismatchError(f"omega constante {tuning.d}x{tuning.d} para d={cov.d}")
    return tuning


# =============================================================================
# INFORME
# =============================================================================

@dataclass(frozen=True)
class EstimateReport:
    """Resultado completo de una estimación MPD."""
    theta_mpd: np.ndarray
    components: ComponentEstimates
    tuning: TuningMatrix
    covariance: CovarianceComponents
    sigma: MPDCovariance
    intervals: List[ConfidenceInterval]
    labelled_only_sigma: MPDCovariance
    labelled_only_intervals: List[ConfidenceInterval]
    N: int
    n_labelled: int
    alpha: float
    parameter_names: Tuple[str, ...]
    flags: Tuple[str, ...] = ()

    def to_frame(self) -> pd.DataFrame:
        """Una fila por coordenada."""
        rows = []
        for j, name in enumerate(self.parameter_names):
            ci, ci_II = self.intervals[j], self.labelled_only_intervals[j]
            rows.append({
                "parameter": name,
                "theta_mpd": self.theta_mpd[j],
                "sigma_jj": self.sigma.sigma[j, j],
                "lower": ci.lower,
                "upper": ci.upper,
                "theta_II": self.components.theta_II[j],
                "lower_II": ci_II.lower,
                "upper_II": ci_II.upper,
                "gamma_I": self.components.gamma_I[j],
                "gamma_II": self.components.gamma_II[j],
            })
        return pd.DataFrame(rows)


def estimate_mpd(loss: LossModel, study, tuning="optimal", alpha: float = 0.10,
                 constant_omega=None, ridge: Optional[float] = None,
                 parameter_names: Optional[Sequence[str]] = None) -> EstimateReport:
    """
    Pipeline completo: componentes, Omega, Sigma^MPD e intervalos.

    Las varianzas negativas se recortan a 0 para construir los intervalos y
    se marca ``clamped_variance``.
    """
    components = fit_components(loss, study)
    cov = covariance_components(loss, study, components)
    omega = resolve_tuning(tuning, cov, constant_omega, ridge)
    theta_mpd = ptd_combine(components, omega)
    sigma = mpd_covariance(cov, omega)
    labelled_only = mpd_covariance(cov, TuningMatrix.zero(cov.d))

    flags = list(sigma.flags)
    intervals = [confidence_interval(theta_mpd, sigma, study.N, alpha, j, clamp_negative=True)
                 for j in range(loss.d)]
    intervals_II = [confidence_interval(components.theta_II, labelled_only, study.N, alpha, j,
                                        clamp_negative=True)
                    for j in range(loss.d)]
    if any(ci.clamped for ci in intervals):
        flags.append("clamped_variance")

    names = tuple(parameter_names) if parameter_names is not None else tuple(
        f"theta_{j}" for j in range(loss.d)
    )
    logger.debug(f"MPD: theta={np.round(theta_mpd, 4).tolist()} omega={omega.mode.value}")
    return EstimateReport(
        theta_mpd=theta_mpd,
        components=components,
        tuning=omega,
        covariance=cov,
        sigma=sigma,
        intervals=intervals,
        labelled_only_sigma=labelled_only,
        labelled_only_intervals=intervals_II,
        N=study.N,
        n_labelled=study.n_labelled,
        alpha=alpha,
        parameter_names=names,
        flags=tuple(flags),
    )
