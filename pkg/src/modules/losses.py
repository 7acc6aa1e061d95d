"""
Losses - Pérdidas de M-estimación
==================================
Define la abstracción l_theta(x) con sus contratos de valor, gradiente y
Hessiano, y las cuatro pérdidas concretas:

- mean: (x - theta)^2 / 2 sobre la respuesta
- quantile(tau): pinball (x - theta)(tau - 1{x <= theta})
- linear_regression: (y - z.theta)^2 / 2
- logistic_regression: log(1 + exp(z.theta)) - y z.theta

En el pliegue del cuantil se usa la derivada de Dini por la derecha, es decir
1{x <= theta} vale 1 cuando x == theta.

El Hessiano de la pérdida cuantil es una densidad kernel ponderada de la
respuesta evaluada en theta (kernel gaussiano, ancho de banda de Silverman
ponderado).

Versión: 1.0
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from modules.errors import DimensionMismatchError, MissingContextError, SingularHessianError

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    """Tipos de pérdida soportados."""
    MEAN = "mean"
    QUANTILE = "quantile"
    LINEAR = "linear_regression"
    LOGISTIC = "logistic_regression"


@dataclass(frozen=True)
class FeatureMap:
    """
    Qué columnas del vector de variables son respuesta y covariables.

    Los índices se refieren al vector lógico X = (X^c, X^e) (o su versión
    barata X~ = (X^c, X~^e), que comparte el mismo orden de columnas).
    """
    n_features: int
    response: int
    covariates: Tuple[int, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        if not 0 <= self.response < self.n_features:
            raise DimensionMismatchError(
                f"response index {self.response} fuera de [0, {self.n_features})"
            )
        for col in self.covariates:
            if not 0 <= col < self.n_features:
                raise DimensionMismatchError(
                    f"covariate index {col} fuera de [0, {self.n_features})"
                )


@dataclass(frozen=True)
class DensityEstimate:
    """Densidad kernel ponderada evaluada en theta."""
    theta: float
    bandwidth: float
    value: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise SingularHessianError(f"bandwidth debe ser > 0 (recibido {self.bandwidth})")
        if self.value < 0:
            raise SingularHessianError(f"densidad negativa: {self.value}")


@dataclass(frozen=True)
class HessianContext:
    """Muestra ponderada de la respuesta para el Hessiano del cuantil."""
    responses: np.ndarray
    weights: np.ndarray


# =============================================================================
# CUANTILES Y DENSIDADES PONDERADAS
# =============================================================================

def weighted_quantile(values: np.ndarray, weights: np.ndarray, tau: float) -> float:
    """
    Menor valor q tal que sum(w 1{x <= q}) / sum(w) >= tau.

    Los empates se resuelven hacia el valor más pequeño.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    keep = weights > 0
    values, weights = values[keep], weights[keep]
    if values.size == 0:
        raise SingularHessianError("weighted_quantile sin pesos positivos")

    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    cumulative = np.cumsum(weights[order])
    total = cumulative[-1]
    idx = int(np.searchsorted(cumulative, tau * total, side="left"))
    return float(sorted_values[min(idx, sorted_values.size - 1)])


def silverman_bandwidth(values: np.ndarray, weights: np.ndarray) -> float:
    """
    h = 0.9 * min(sigma_w, IQR_w / 1.34) * n_eff^(-1/5), n_eff = (sum w)^2 / sum w^2.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        raise SingularHessianError("silverman_bandwidth sin pesos positivos")

    mean = np.dot(weights, values) / total
    sigma = np.sqrt(np.dot(weights, (values - mean) ** 2) / total)
    iqr = weighted_quantile(values, weights, 0.75) - weighted_quantile(values, weights, 0.25)
    n_eff = total ** 2 / np.dot(weights, weights)

    spread = min(sigma, iqr / 1.34)
    if spread <= 0:
        # IQR nulo con dispersión positiva (masas puntuales)
        spread = max(sigma, iqr / 1.34)
    if spread <= 0:
        raise SingularHessianError("muestra degenerada: dispersión nula, densidad no estimable")
    return float(0.9 * spread * n_eff ** (-0.2))


def weighted_kde(values: np.ndarray, weights: np.ndarray, theta: float,
                 bandwidth: Optional[float] = None) -> DensityEstimate:
    """Densidad kernel gaussiana ponderada en theta."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    h = silverman_bandwidth(values, weights) if bandwidth is None else float(bandwidth)
    density = np.dot(weights, norm.pdf((theta - values) / h)) / (h * weights.sum())
    return DensityEstimate(theta=float(theta), bandwidth=h, value=float(density))


# =============================================================================
# MODELO DE PÉRDIDA
# =============================================================================

class LossModel:
    """
    Objetivo de M-estimación con contratos de valor / gradiente / Hessiano.

    Las operaciones por lote (``values``, ``gradients``, ``weighted_hessian``)
    reciben matrices n x p; las versiones de un punto reciben un vector p.
    """

    def __init__(self, kind: LossKind, feature_map: FeatureMap, tau: float = 0.5):
        self.kind = LossKind(kind)
        self.feature_map = feature_map
        self.tau = float(tau)

        if self.kind == LossKind.QUANTILE and not 0 < self.tau < 1:
            raise DimensionMismatchError(f"tau debe estar en (0, 1): {tau}")
        if self.kind in (LossKind.MEAN, LossKind.QUANTILE) and feature_map.covariates:
            raise DimensionMismatchError(f"la pérdida {self.kind.value} no admite covariables")

        self._values = {
            LossKind.MEAN: self._values_mean,
            LossKind.QUANTILE: self._values_quantile,
            LossKind.LINEAR: self._values_linear,
            LossKind.LOGISTIC: self._values_logistic,
        }[self.kind]
        self._gradients = {
            LossKind.MEAN: self._gradients_mean,
            LossKind.QUANTILE: self._gradients_quantile,
            LossKind.LINEAR: self._gradients_linear,
            LossKind.LOGISTIC: self._gradients_logistic,
        }[self.kind]

    @property
    def d(self) -> int:
        """Dimensión del parámetro."""
        if self.kind in (LossKind.MEAN, LossKind.QUANTILE):
            return 1
        return len(self.feature_map.covariates) + int(self.feature_map.intercept)

    @property
    def is_smooth(self) -> bool:
        return self.kind != LossKind.QUANTILE

    def __repr__(self) -> str:
        extra = f", tau={self.tau}" if self.kind == LossKind.QUANTILE else ""
        return f"LossModel({self.kind.value}, d={self.d}{extra})"

    # ----- preparación de datos -----

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.d,):
            raise DimensionMismatchError(f"theta con forma {theta.shape}, se esperaba ({self.d},)")
        return theta

    def _check_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.feature_map.n_features:
            raise DimensionMismatchError(
                f"features con forma {X.shape}, se esperaban {self.feature_map.n_features} columnas"
            )
        return X

    def response(self, X) -> np.ndarray:
        return self._check_features(X)[:, self.feature_map.response]

    def design(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """Devuelve (y, Z) con la columna de intercepto al principio si aplica."""
        X = self._check_features(X)
        y = X[:, self.feature_map.response]
        Z = X[:, list(self.feature_map.covariates)]
        if self.feature_map.intercept:
            Z = np.column_stack([np.ones(X.shape[0]), Z])
        return y, Z

    # ----- valores -----

    def values(self, theta, X) -> np.ndarray:
        return self._values(self._check_theta(theta), X)

    def value(self, theta, x) -> float:
        return float(self.values(theta, x)[0])

    def _values_mean(self, theta, X):
        return 0.5 * (self.response(X) - theta[0]) ** 2

    def _values_quantile(self, theta, X):
        r = self.response(X) - theta[0]
        return r * (self.tau - (r <= 0))

    def _values_linear(self, theta, X):
        y, Z = self.design(X)
        return 0.5 * (y - Z @ theta) ** 2

    def _values_logistic(self, theta, X):
        y, Z = self.design(X)
        eta = Z @ theta
        return np.logaddexp(0.0, eta) - y * eta

    # ----- gradientes -----

    def gradients(self, theta, X) -> np.ndarray:
        """Matriz n x d de gradientes por unidad."""
        return self._gradients(self._check_theta(theta), X)

    def gradient(self, theta, x) -> np.ndarray:
        return self.gradients(theta, x)[0]

    def _gradients_mean(self, theta, X):
        return -(self.response(X) - theta[0])[:, None]

    def _gradients_quantile(self, theta, X):
        # Dini por la derecha: en x == theta cuenta como x <= theta
        below = (self.response(X) <= theta[0]).astype(float)
        return (below - self.tau)[:, None]

    def _gradients_linear(self, theta, X):
        y, Z = self.design(X)
        return -Z * (y - Z @ theta)[:, None]

    def _gradients_logistic(self, theta, X):
        y, Z = self.design(X)
        return Z * (expit(Z @ theta) - y)[:, None]

    # ----- Hessianos -----

    def hessian(self, theta, x, context: Optional[HessianContext] = None) -> np.ndarray:
        """
        Hessiano d x d en un punto.

        Para el cuantil es la densidad kernel de ``context`` evaluada en theta,
        compartida por todas las unidades.
        """
        theta = self._check_theta(theta)
        X = self._check_features(x)
        if self.kind == LossKind.QUANTILE:
            if context is None:
                raise MissingContextError("el Hessiano del cuantil necesita una muestra ponderada")
            return np.array([[self.density(theta, context).value]])
        return self._weighted_hessian_smooth(theta, X, np.ones(1), 1.0)

    def density(self, theta, context: HessianContext) -> DensityEstimate:
        theta = self._check_theta(theta)
        return weighted_kde(context.responses, context.weights, theta[0])

    def weighted_hessian(self, theta, X, weights, normalizer: Optional[float] = None,
                         context: Optional[HessianContext] = None) -> np.ndarray:
        """
        normalizer^-1 * sum_i w_i * l''_theta(x_i).

        Args:
            theta: Punto de evaluación
            X: Matriz n x p
            weights: Pesos por unidad (n)
            normalizer: Denominador (por defecto n)
            context: Muestra para la densidad del cuantil; por defecto la propia
                (respuesta de X con los mismos pesos)
        """
        theta = self._check_theta(theta)
        X = self._check_features(X)
        weights = np.asarray(weights, dtype=float)
        normalizer = float(X.shape[0] if normalizer is None else normalizer)

        if self.kind == LossKind.QUANTILE:
            if context is None:
                context = HessianContext(responses=self.response(X), weights=weights)
            density = self.density(theta, context)
            return np.array([[weights.sum() / normalizer * density.value]])
        return self._weighted_hessian_smooth(theta, X, weights, normalizer)

    def _weighted_hessian_smooth(self, theta, X, weights, normalizer):
        if self.kind == LossKind.MEAN:
            return np.array([[weights.sum() / normalizer]])
        _, Z = self.design(X)
        if self.kind == LossKind.LINEAR:
            scale = weights
        else:
            p = expit(Z @ theta)
            scale = weights * p * (1.0 - p)
        return (Z * scale[:, None]).T @ Z / normalizer


def build_loss(kind: str, names: Sequence[str], response: str,
               covariates: Sequence[str] = (), intercept: bool = True,
               tau: float = 0.5) -> LossModel:
    """
    Construye un LossModel resolviendo nombres de variables a índices.

    Args:
        kind: Tipo de pérdida (ver LossKind)
        names: Nombres lógicos de las columnas de X, en orden
        response: Nombre de la respuesta
        covariates: Nombres de covariables (regresiones)
        intercept: Añadir columna de intercepto (regresiones)
        tau: Nivel del cuantil
    """
    names = list(names)
    missing = [n for n in [response, *covariates] if n not in names]
    if missing:
        raise DimensionMismatchError(f"variables desconocidas en la pérdida: {missing}")

    kind = LossKind(kind)
    regression = kind in (LossKind.LINEAR, LossKind.LOGISTIC)
    feature_map = FeatureMap(
        n_features=len(names),
        response=names.index(response),
        covariates=tuple(names.index(c) for c in covariates) if regression else (),
        intercept=intercept if regression else False,
    )
    return LossModel(kind, feature_map, tau=tau)


def parameter_names(loss: LossModel, names: Sequence[str]) -> list:
    """Etiquetas de las coordenadas de theta (intercepto incluido)."""
    names = list(names)
    if loss.kind in (LossKind.MEAN, LossKind.QUANTILE):
        return [names[loss.feature_map.response]]
    labels = ["intercept"] if loss.feature_map.intercept else []
    return labels + [names[c] for c in loss.feature_map.covariates]
