"""
Inference - Covarianza asintótica e intervalos de confianza
============================================================
Estimadores plug-in de los componentes de covarianza:

    S11 = N^-1 sum W_i^2 g_theta(X_i) g_theta(X_i)^T
    S12 = N^-1 sum W_i^2 g_theta(X_i) g_gamma(X~_i)^T
    S22 = N^-1 sum W_i^2 g_gamma(X~_i) g_gamma(X~_i)^T
    S13 = N^-1 sum W_i   g_theta(X_i) g_gamma(X~_i)^T
    S33 = N^-1 sum       g_gamma(X~_i) g_gamma(X~_i)^T
    H_theta = N^-1 sum W_i l''_theta(X_i)
    H_gamma = N^-1 sum l''_gamma(X~_i)

con g_theta evaluado en theta^II y g_gamma en gamma^I (nunca gamma^II).

Covarianza MPD:
    Sigma = Hi S11 Hi + O Gi (S22 - S33) Gi O^T + Hi (S13 - S12) Gi O^T + (...)^T
con Hi = H_theta^-1, Gi = H_gamma^-1, O = Omega.

Versión: 1.0
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import norm

from modules.errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientDataError,
    InvalidVarianceError,
    SingularHessianError,
)
from modules.losses import LossModel

logger = logging.getLogger(__name__)

# Umbral de número de condición para invertir Hessianos
MAX_CONDITION = 1e12


class TuningMode(str, Enum):
    IDENTITY = "identity"
    ZERO = "zero"
    OPTIMAL = "optimal"
    CONSTANT = "constant"


@dataclass(frozen=True)
class TuningMatrix:
    """Matriz de ajuste Omega (d x d) y el modo que la produjo."""
    omega: np.ndarray
    mode: TuningMode = TuningMode.CONSTANT
    ridge: Optional[float] = None

    def __post_init__(self):
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        if omega.shape[0] != omega.shape[1]:
            raise DimensionMismatchError(f"Omega debe ser cuadrada, forma {omega.shape}")
        if not np.all(np.isfinite(omega)):
            raise ConfigurationError("Omega contiene valores no finitos")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "mode", TuningMode(self.mode))

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    @classmethod
    def identity(cls, d: int) -> "TuningMatrix":
        return cls(np.eye(d), TuningMode.IDENTITY)

    @classmethod
    def zero(cls, d: int) -> "TuningMatrix":
        return cls(np.zeros((d, d)), TuningMode.ZERO)


@dataclass(frozen=True)
class CovarianceComponents:
    S11: np.ndarray
    S12: np.ndarray
    S22: np.ndarray
    S13: np.ndarray
    S33: np.ndarray
    H_theta: np.ndarray
    H_gamma: np.ndarray

    @property
    def d(self) -> int:
        return self.S11.shape[0]


@dataclass(frozen=True)
class MPDCovariance:
    """Sigma^MPD con la Omega usada y diagnósticos."""
    sigma: np.ndarray
    omega_used: TuningMatrix
    is_psd: bool = True
    flags: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.sigma).copy()


@dataclass(frozen=True)
class ConfidenceInterval:
    coordinate: int
    level: float
    lower: float
    upper: float
    clamped: bool = False

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def stable_inverse(matrix: np.ndarray, name: str = "Hessiano") -> np.ndarray:
    """
    Inversa vía factorización LU con diagnóstico de condición.

    Raises:
        SingularHessianError: Si la condición supera MAX_CONDITION
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if not np.all(np.isfinite(matrix)):
        raise SingularHessianError(f"{name} con entradas no finitas")
    condition = np.linalg.cond(matrix)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularHessianError(f"{name} singular (condición {condition:.3g})")
    lu, piv = linalg.lu_factor(matrix)
    return linalg.lu_solve((lu, piv), np.eye(matrix.shape[0]))


# =============================================================================
# COMPONENTES
# =============================================================================

def sandwich_terms(g_theta: np.ndarray, g_gamma_labelled: np.ndarray, g_gamma_all: np.ndarray,
                   W: np.ndarray, N: int) -> Tuple[np.ndarray, ...]:
    """
    S11, S12, S22, S13 y S33 a partir de gradientes ya evaluados.

    Las tres primeras matrices se indexan por las unidades etiquetadas con
    pesos W; ``g_gamma_all`` recorre toda la Fase I.
    """
    W = np.asarray(W, dtype=float)
    W2 = (W ** 2)[:, None]
    S11 = _symmetrize((W2 * g_theta).T @ g_theta / N)
    S12 = (W2 * g_theta).T @ g_gamma_labelled / N
    S22 = _symmetrize((W2 * g_gamma_labelled).T @ g_gamma_labelled / N)
    S13 = (W[:, None] * g_theta).T @ g_gamma_labelled / N
    S33 = _symmetrize(g_gamma_all.T @ g_gamma_all / N)
    return S11, S12, S22, S13, S33


def covariance_components(loss: LossModel, study, components) -> CovarianceComponents:
    """
    Calcula S11..S33, H_theta y H_gamma para un estudio completado.

    Args:
        loss: Pérdida del problema
        study: ObservedStudy con todas las olas ejecutadas
        components: ComponentEstimates (usa theta_II y gamma_I)
    """
    labelled = study.labelled_indices
    if labelled.size == 0:
        raise InsufficientDataError("no hay unidades etiquetadas")

    N = study.N
    W = study.weights.aggregated[labelled]
    X_gold = study.gold_matrix(labelled)
    X_proxy = study.proxy_matrix()

    g_theta = loss.gradients(components.theta_II, X_gold)
    g_gamma_labelled = loss.gradients(components.gamma_I, X_proxy[labelled])
    g_gamma_all = loss.gradients(components.gamma_I, X_proxy)
    terms = sandwich_terms(g_theta, g_gamma_labelled, g_gamma_all, W, N)

    H_theta = _symmetrize(loss.weighted_hessian(components.theta_II, X_gold, W, normalizer=N))
    H_gamma = _symmetrize(loss.weighted_hessian(components.gamma_I, X_proxy, np.ones(N), normalizer=N))

    return CovarianceComponents(*terms, H_theta, H_gamma)


def mpd_covariance(cov: CovarianceComponents, omega) -> MPDCovariance:
    """
    Sigma^MPD para una Omega dada (TuningMatrix o matriz).

    Un resultado no semidefinido positivo no es un error: se registra un
    aviso y el flag ``non_psd_covariance``.
    """
    if not isinstance(omega, TuningMatrix):
        omega = TuningMatrix(omega)
    if omega.d != cov.d:
        raise DimensionMismatchError(f"Omega {omega.d}x{omega.d} con componentes de dimensión {cov.d}")

    H_theta_inv = stable_inverse(cov.H_theta, "H_theta")
    H_gamma_inv = stable_inverse(cov.H_gamma, "H_gamma")
    O = omega.omega

    sandwich = H_theta_inv @ cov.S11 @ H_theta_inv
    proxy_term = O @ H_gamma_inv @ (cov.S22 - cov.S33) @ H_gamma_inv @ O.T
    cross = H_theta_inv @ (cov.S13 - cov.S12) @ H_gamma_inv @ O.T
    sigma = _symmetrize(sandwich + proxy_term + cross + cross.T)

    eigenvalues = np.linalg.eigvalsh(sigma)
    tolerance = 1e-12 * max(1.0, float(np.abs(eigenvalues).max()))
    is_psd = bool(eigenvalues.min() >= -tolerance)
    flags = ()
    if not is_psd:
        logger.warning(f"Sigma^MPD no es semidefinida positiva (autovalor mínimo {eigenvalues.min():.3g})")
        flags = ("non_psd_covariance",)
    return MPDCovariance(sigma=sigma, omega_used=omega, is_psd=is_psd, flags=flags)


def confidence_interval(theta_mpd, sigma, N: int, alpha: float, j: int,
                        clamp_negative: bool = False) -> ConfidenceInterval:
    """
    Intervalo theta_j +/- z_{1-alpha/2} sqrt(Sigma_jj / N).

    Args:
        theta_mpd: Estimación puntual
        sigma: MPDCovariance o matriz d x d
        N: Tamaño de Fase I
        alpha: Nivel (0 < alpha < 1)
        j: Coordenada
        clamp_negative: Recortar Sigma_jj < 0 a 0 (marca ``clamped``) en vez de fallar

    Raises:
        InvalidVarianceError: Si Sigma_jj < 0 y no se pide recorte
    """
    if not 0 < alpha < 1:
        raise ConfigurationError(f"alpha debe estar en (0, 1): {alpha}")
    matrix = sigma.sigma if isinstance(sigma, MPDCovariance) else np.atleast_2d(sigma)
    variance = float(matrix[j, j])
    clamped = False
    if variance < 0:
        if not clamp_negative:
            raise InvalidVarianceError(f"Sigma[{j},{j}] = {variance:.6g} < 0")
        logger.warning(f"Varianza negativa en la coordenada {j} ({variance:.3g}); se recorta a 0")
        variance, clamped = 0.0, True

    center = float(np.atleast_1d(theta_mpd)[j])
    half_width = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(variance / N)
    return ConfidenceInterval(
        coordinate=j,
        level=1.0 - alpha,
        lower=center - half_width,
        upper=center + half_width,
        clamped=clamped,
    )
