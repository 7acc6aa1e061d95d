"""
Strategies - Reglas de etiquetado por ola
==========================================
Estrategias disponibles:

- uniform: probabilidad constante n_targ^(k) / |U| sobre las no etiquetadas.
- greedy_knn / greedy_stratified: regla aproximadamente óptima

      pi(x~) proporcional a sqrt(rho(x~)) * prod_{k<k*} (1 - pi^(k)(x~))^(-1/2)

  donde rho se estima con k vecinos más cercanos o por estratos a partir de
  los cuadrados psi_i de la diferencia de funciones de influencia del ajuste
  interino. Las intensidades se escalan al presupuesto de la ola, se recortan
  a [b_targ, 1 - b_targ] y se rebalancean para que la suma sea exacta.

  psi_i usa por defecto la fila j de la Omega óptima estimada con las olas
  previas (``psi_tuning: optimal``), que es la Omega que aplicará el
  estimador final; ``psi_tuning: identity`` fija Omega = I.

Las reglas sólo dependen de valores (nunca de índices de unidad). Todas las
sumas que alimentan a una regla se hacen en un orden canónico por valor para
que permutar las unidades permute las probabilidades bit a bit.

Versión: 1.0
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from modules.errors import (
    BudgetInfeasibleError,
    ConfigurationError,
    DivisionSafetyError,
    EmptyTrainingSetError,
    InsufficientDataError,
    NonConvergenceError,
    ProtocolError,
    RankDeficiencyError,
    SingularHessianError,
    StratumDegeneracyError,
)
from modules.inference import CovarianceComponents, TuningMatrix, TuningMode, sandwich_terms, stable_inverse
from modules.losses import LossModel

logger = logging.getLogger(__name__)

RHO_FLOOR = 1e-12
DEFAULT_NEIGHBORS = 20
QUERY_CHUNK = 512

# Fallos del ajuste interino que activan el respaldo uniforme
INTERIM_FAILURES = (
    InsufficientDataError,
    SingularHessianError,
    NonConvergenceError,
    RankDeficiencyError,
    EmptyTrainingSetError,
)

PSI_TUNING_MODES = (TuningMode.OPTIMAL, TuningMode.IDENTITY)


# =============================================================================
# REGLAS
# =============================================================================

class LabelRule:
    """
    Mapa x~ -> probabilidad de etiquetado.

    ``labelled_probability`` es la probabilidad registrada para unidades ya
    etiquetadas (None = la propia regla). ``fallback_reason`` indica que la
    regla es un respaldo uniforme.
    """

    labelled_probability: Optional[float] = None
    fallback_reason: Optional[str] = None

    def __init__(self):
        self._cache_input = None
        self._cache_output = None

    def probabilities(self, cheap: np.ndarray) -> np.ndarray:
        """Probabilidades para una matriz n x p de vectores baratos."""
        # Las reglas codiciosas evalúan las reglas previas en cada ola
        if cheap is self._cache_input:
            return self._cache_output
        cheap_matrix = np.atleast_2d(np.asarray(cheap, dtype=float))
        result = np.asarray(self._evaluate(cheap_matrix), dtype=float)
        if isinstance(cheap, np.ndarray) and not cheap.flags.writeable:
            self._cache_input, self._cache_output = cheap, result
        return result

    def __call__(self, x) -> float:
        return float(self.probabilities(np.asarray(x, dtype=float)[None, :])[0])

    def _evaluate(self, cheap: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantRule(LabelRule):
    def __init__(self, value: float, labelled_probability: Optional[float] = None,
                 fallback_reason: Optional[str] = None):
        super().__init__()
        self.value = float(value)
        self.labelled_probability = labelled_probability
        self.fallback_reason = fallback_reason

    def _evaluate(self, cheap):
        return np.full(cheap.shape[0], self.value)

    def __repr__(self) -> str:
        return f"ConstantRule({self.value:.6g})"


class FixedRule(LabelRule):
    """Regla fija a partir de una función vectorizada de la matriz barata."""

    def __init__(self, function: Callable[[np.ndarray], np.ndarray]):
        super().__init__()
        self.function = function

    def _evaluate(self, cheap):
        return self.function(cheap)


# =============================================================================
# CONFIGURACIÓN
# =============================================================================

class StrategyKind(str, Enum):
    UNIFORM = "uniform"
    GREEDY_KNN = "greedy_knn"
    GREEDY_STRATIFIED = "greedy_stratified"


@dataclass(frozen=True)
class StrataSpec:
    """
    Partición del espacio barato.

    - ``breakpoints``: columna barata -> cortes interiores; los estratos son
      el producto cartesiano de los intervalos (a, b].
    - ``assignment``: columna barata discreta cuyos valores son los estratos.
    """
    breakpoints: Dict[int, Tuple[float, ...]] = field(default_factory=dict)
    assignment: Optional[int] = None

    def __post_init__(self):
        if bool(self.breakpoints) == (self.assignment is not None):
            raise ConfigurationError("los estratos necesitan breakpoints o una columna de asignación (sólo una)")
        for column, edges in self.breakpoints.items():
            if np.any(np.diff(np.asarray(edges, dtype=float)) <= 0):
                raise ConfigurationError(f"cortes no estrictamente crecientes en la columna {column}")

    def codes(self, cheap: np.ndarray, levels: Optional[np.ndarray] = None) -> np.ndarray:
        """Código entero del estrato de cada fila."""
        cheap = np.atleast_2d(cheap)
        if self.assignment is not None:
            values = cheap[:, self.assignment]
            idx = np.searchsorted(levels, values)
            idx = np.minimum(idx, levels.size - 1)
            unknown = levels[idx] != values
            if np.any(unknown):
                raise StratumDegeneracyError(
                    f"valores de estrato desconocidos: {np.unique(values[unknown]).tolist()}",
                    strata=np.unique(values[unknown]).tolist(),
                )
            return idx
        columns = sorted(self.breakpoints)
        bins = [np.searchsorted(np.asarray(self.breakpoints[c], dtype=float), cheap[:, c], side="left")
                for c in columns]
        shape = self.shape()
        return np.ravel_multi_index(tuple(bins), shape)

    def shape(self) -> Tuple[int, ...]:
        return tuple(len(self.breakpoints[c]) + 1 for c in sorted(self.breakpoints))

    def n_strata(self, levels: Optional[np.ndarray] = None) -> int:
        if self.assignment is not None:
            return int(levels.size)
        return int(np.prod(self.shape()))


@dataclass(frozen=True)
class StrategyConfig:
    """
    Estrategia de etiquetado.

    Los presupuestos por ola y b_targ vienen del StudyDesign del estudio.
    """
    kind: StrategyKind = StrategyKind.GREEDY_KNN
    target_coordinate: int = 0
    k_neighbors: int = DEFAULT_NEIGHBORS
    strata: Optional[StrataSpec] = None
    psi_tuning: TuningMode = TuningMode.OPTIMAL

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "psi_tuning", TuningMode(self.psi_tuning))
        if self.psi_tuning not in PSI_TUNING_MODES:
            raise ConfigurationError(f"psi_tuning debe ser optimal o identity (recibido {self.psi_tuning.value})")
        if self.k_neighbors < 1:
            raise ConfigurationError(f"k_neighbors debe ser >= 1 (recibido {self.k_neighbors})")
        if self.kind == StrategyKind.GREEDY_STRATIFIED and self.strata is None:
            raise ConfigurationError("greedy_stratified necesita una especificación de estratos")


# =============================================================================
# OPERACIONES
# =============================================================================

def uniform_rule(n_targ: float, N: int, b_targ: float,
                 labelled_probability: Optional[float] = None) -> ConstantRule:
    """
    Regla constante n_targ / N recortada a [b_targ, 1 - b_targ].

    Raises:
        ConfigurationError: Si el presupuesto no cabe en (0, N (1 - b_targ)]
    """
    if N < 1 or not 0 < n_targ <= N * (1.0 - b_targ):
        raise ConfigurationError(
            f"presupuesto {n_targ} incompatible con N={N} y b_targ={b_targ}"
        )
    value = min(max(n_targ / N, b_targ), 1.0 - b_targ)
    return ConstantRule(value, labelled_probability=labelled_probability)


@dataclass(frozen=True)
class InterimFit:
    """Ajuste interino con las olas 1..k*-1."""
    theta_interim: np.ndarray
    H_interim: np.ndarray
    unit_ids: np.ndarray
    psi: np.ndarray
    tuning: Optional[TuningMatrix] = None

    @property
    def psi_values(self) -> Dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.unit_ids, self.psi)}


def prior_wave_weights(study, k_star: int) -> np.ndarray:
    """sum_{k<k*} c_k W^(k) / sum_{k<k*} c_k."""
    n_prior = k_star - 1
    if n_prior < 1:
        raise ProtocolError("no hay olas previas")
    c = np.asarray(study.design.c[:n_prior], dtype=float)
    mass = c.sum()
    if not mass > 0:
        raise InsufficientDataError(f"las olas previas a {k_star} no tienen peso en la mezcla c")
    return (study.wave_weights(n_prior) * c).sum(axis=1) / mass


def interim_fit(loss: LossModel, study, k_star: int, gamma_I, H_gamma, j: int,
                tuning=TuningMode.OPTIMAL) -> InterimFit:
    """
    Ajuste theta^{II,(k*-1)}, su Hessiano y psi_i para las unidades etiquetadas.

    psi_i = (e_j^T H^-1 grad l_theta(X_i) - e_j^T Omega H_gamma^-1 grad l_gamma^I(X~_i))^2

    Con ``tuning`` = identity, Omega = I. Con optimal, Omega es la óptima
    calculada con los componentes de covarianza de las olas 1..k*-1.

    Raises:
        InsufficientDataError: Menos de d + 1 unidades etiquetadas
        SingularHessianError: Hessiano interino u Omega no invertibles
    """
    # Import local: estimation_engine depende de este paquete
    from engines.estimation_engine import fit_weighted_m

    weights = prior_wave_weights(study, k_star)
    labelled = study.labelled_indices
    labelled = labelled[weights[labelled] > 0]
    if labelled.size < loss.d + 1:
        raise InsufficientDataError(
            f"{labelled.size} unidades etiquetadas antes de la ola {k_star}, se necesitan {loss.d + 1}"
        )
    if not 0 <= j < loss.d:
        raise ConfigurationError(f"coordenada objetivo {j} fuera de [0, {loss.d})")

    N = study.N
    X_gold = study.gold_matrix(labelled)
    X_proxy = study.proxy_matrix()[labelled]
    w = weights[labelled]

    theta = fit_weighted_m(loss, X_gold, w, normalizer=N).theta
    order = _value_order(X_gold, X_proxy, w)
    H = loss.weighted_hessian(theta, X_gold[order], w[order], normalizer=N)
    H_inv = stable_inverse(H, "Hessiano interino")
    H_gamma_inv = stable_inverse(H_gamma, "H_gamma")

    g_theta = loss.gradients(theta, X_gold)
    g_gamma = loss.gradients(gamma_I, X_proxy)

    omega = None
    direction = H_gamma_inv[j]
    if TuningMode(tuning) == TuningMode.OPTIMAL:
        omega = _interim_tuning(loss, study, gamma_I, H, H_gamma, g_theta[order], g_gamma[order], w[order])
        direction = omega.omega[j] @ H_gamma_inv
        logger.debug(f"Ola {k_star}: fila {j} de Omega interina = {np.round(omega.omega[j], 4).tolist()}")
    elif TuningMode(tuning) != TuningMode.IDENTITY:
        raise ConfigurationError(f"psi_tuning debe ser optimal o identity (recibido {tuning})")

    psi = (g_theta @ H_inv[j] - g_gamma @ direction) ** 2
    return InterimFit(theta_interim=theta, H_interim=H, unit_ids=labelled, psi=psi, tuning=omega)


def _interim_tuning(loss: LossModel, study, gamma_I, H, H_gamma, g_theta, g_gamma, w) -> TuningMatrix:
    """Omega óptima con los pesos de las olas previas (filas en orden canónico)."""
    from engines.estimation_engine import optimal_tuning

    cheap = study.proxy_matrix()
    g_gamma_all = loss.gradients(gamma_I, cheap[_value_order(cheap)])
    terms = sandwich_terms(g_theta, g_gamma, g_gamma_all, w, study.N)
    return optimal_tuning(CovarianceComponents(*terms, H, H_gamma))


def _value_order(*arrays) -> np.ndarray:
    keys = np.column_stack(arrays)
    return np.lexsort(keys.T[::-1])


def _sorted_statistics(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Media y desviación por columna calculadas sobre columnas ordenadas."""
    ordered = np.sort(values, axis=0)
    mean = ordered.mean(axis=0)
    std = np.sqrt(np.sort((ordered - mean) ** 2, axis=0).mean(axis=0))
    std = np.where(std > 0, std, 1.0)
    return mean, std


class KNNRho:
    """
    Estimador kNN de rho: media de psi de los k vecinos más cercanos.

    Distancia euclídea sobre variables tipificadas con estadísticos del
    conjunto de entrenamiento. Empates por id de unidad ascendente, así que
    con distancias exactamente iguales rho depende de la numeración.
    """

    def __init__(self, unit_ids, features, psi, k_neighbors: int = DEFAULT_NEIGHBORS):
        unit_ids = np.asarray(unit_ids)
        features = np.atleast_2d(np.asarray(features, dtype=float))
        psi = np.asarray(psi, dtype=float)
        if unit_ids.size == 0:
            raise EmptyTrainingSetError("kNN sin puntos de entrenamiento")
        if k_neighbors < 1:
            raise ConfigurationError(f"k_neighbors debe ser >= 1 (recibido {k_neighbors})")

        order = np.argsort(unit_ids, kind="stable")
        self.mean, self.std = _sorted_statistics(features)
        self.train = (features[order] - self.mean) / self.std
        self.psi = psi[order]
        self.k = min(int(k_neighbors), self.psi.size)

    def __call__(self, query: np.ndarray) -> np.ndarray:
        query = np.atleast_2d(np.asarray(query, dtype=float))
        scaled = (query - self.mean) / self.std
        result = np.empty(scaled.shape[0])
        for start in range(0, scaled.shape[0], QUERY_CHUNK):
            block = scaled[start:start + QUERY_CHUNK]
            distances = ((block[:, None, :] - self.train[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argsort(distances, axis=1, kind="stable")[:, :self.k]
            result[start:start + QUERY_CHUNK] = self.psi[nearest].mean(axis=1)
        return result


def knn_rho(train_ids, train_features, train_psi, k_neighbors: int, query) -> np.ndarray:
    """rho kNN evaluado en ``query`` (vector o matriz)."""
    estimator = KNNRho(train_ids, train_features, train_psi, k_neighbors)
    query = np.asarray(query, dtype=float)
    values = estimator(query)
    return float(values[0]) if query.ndim == 1 else values


class StratumRho:
    """rho constante por estrato."""

    def __init__(self, strata: StrataSpec, values: np.ndarray, levels: Optional[np.ndarray] = None):
        self.strata = strata
        self.values = np.asarray(values, dtype=float)
        self.levels = levels

    def __call__(self, query: np.ndarray) -> np.ndarray:
        return self.values[self.strata.codes(query, self.levels)]


def stratified_rho(strata: StrataSpec, study, k_star: int, fit: InterimFit) -> StratumRho:
    """
    rho_r = [N^-1 sum_i sum_{k<k*} c_k W_i^(k) 1{i en S_r} psi_i]
            / [N^-1 sum_i 1{i en S_r} sum_{k<k*} c_k]

    Raises:
        StratumDegeneracyError: Estratos sin unidades de Fase I
    """
    cheap = study.proxy_matrix()
    levels = None
    if strata.assignment is not None:
        levels = np.unique(cheap[:, strata.assignment])
    n_strata = strata.n_strata(levels)
    codes = strata.codes(cheap, levels)

    counts = np.bincount(codes, minlength=n_strata)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise StratumDegeneracyError(f"estratos sin unidades de Fase I: {empty.tolist()}", strata=empty.tolist())

    n_prior = k_star - 1
    c = np.asarray(study.design.c[:n_prior], dtype=float)
    mixed = (study.wave_weights(n_prior) * c).sum(axis=1)
    contribution = mixed[fit.unit_ids] * fit.psi
    train_codes = codes[fit.unit_ids]

    order = np.lexsort((contribution, train_codes))
    numerator = np.bincount(train_codes[order], weights=contribution[order], minlength=n_strata)
    values = numerator / (counts * c.sum())

    logger.debug(f"rho por estrato: {np.round(values, 6).tolist()}")
    return StratumRho(strata, values, levels)


class GreedyIntensity:
    """x~ -> sqrt(max(rho(x~), floor)) * prod_{k<k*} (1 - pi^(k)(x~))^(-1/2)."""

    def __init__(self, rho_hat: Callable[[np.ndarray], np.ndarray], prior_rules: Sequence[LabelRule],
                 floor: float = RHO_FLOOR):
        self.rho_hat = rho_hat
        self.prior_rules = tuple(prior_rules)
        self.floor = floor

    def __call__(self, cheap: np.ndarray) -> np.ndarray:
        survival = np.ones(np.atleast_2d(cheap).shape[0])
        for rule in self.prior_rules:
            survival = survival * (1.0 - rule.probabilities(cheap))
        if np.any(survival <= 0):
            raise DivisionSafetyError("una regla previa vale 1: intensidad no definida")
        rho = np.maximum(np.asarray(self.rho_hat(cheap), dtype=float), self.floor)
        return np.sqrt(rho) / np.sqrt(survival)


def greedy_init_rule(rho_hat, prior_rules: Sequence[LabelRule]) -> GreedyIntensity:
    return GreedyIntensity(rho_hat, prior_rules)


@dataclass(frozen=True)
class BudgetTransform:
    """
    Escalado, recorte y rebalanceo de intensidades.

    branch: "down" (n_trim > n_targ), "up" (n_trim < n_targ) o "none".
    """
    scale: float
    b_targ: float
    branch: str = "none"
    alpha: float = 1.0

    def __call__(self, intensities: np.ndarray) -> np.ndarray:
        b = self.b_targ
        trimmed = np.clip(self.scale * np.asarray(intensities, dtype=float), b, 1.0 - b)
        if self.branch == "down":
            result = b + self.alpha * (trimmed - b)
        elif self.branch == "up":
            result = (1.0 - b) - self.alpha * ((1.0 - b) - trimmed)
        else:
            result = trimmed
        return np.clip(result, b, 1.0 - b)


def fit_budget_transform(intensities: np.ndarray, n_targ: float, b_targ: float) -> BudgetTransform:
    """Ajusta el BudgetTransform sobre las intensidades del conjunto no etiquetado."""
    intensities = np.asarray(intensities, dtype=float)
    size = intensities.size
    if size == 0 or not b_targ < n_targ / size < 1.0 - b_targ:
        raise BudgetInfeasibleError(
            f"presupuesto {n_targ} infactible para |U|={size} con b_targ={b_targ}"
        )
    if not np.all(np.isfinite(intensities)) or np.any(intensities <= 0):
        raise BudgetInfeasibleError("intensidades no positivas o no finitas")

    scale = n_targ / math.fsum(intensities)
    trimmed = np.clip(scale * intensities, b_targ, 1.0 - b_targ)
    n_trim = math.fsum(trimmed)

    if math.isclose(n_trim, n_targ, rel_tol=1e-12, abs_tol=0.0):
        return BudgetTransform(scale, b_targ)
    if n_trim > n_targ:
        alpha = (n_targ - b_targ * size) / (n_trim - b_targ * size)
        return BudgetTransform(scale, b_targ, "down", alpha)
    alpha = ((1.0 - b_targ) * size - n_targ) / ((1.0 - b_targ) * size - n_trim)
    return BudgetTransform(scale, b_targ, "up", alpha)


def enforce_budget_overlap(intensities: np.ndarray, n_targ: float, b_targ: float) -> np.ndarray:
    """
    Probabilidades finales con sum = n_targ y valores en [b_targ, 1 - b_targ].

    Raises:
        BudgetInfeasibleError: Si no se cumple b_targ < n_targ / |U| < 1 - b_targ
    """
    return fit_budget_transform(intensities, n_targ, b_targ)(intensities)


class GreedyRule(LabelRule):
    """Regla codiciosa evaluable en cualquier x~."""

    def __init__(self, intensity: GreedyIntensity, transform: BudgetTransform,
                 labelled_probability: Optional[float] = None):
        super().__init__()
        self.intensity = intensity
        self.transform = transform
        self.labelled_probability = labelled_probability

    def _evaluate(self, cheap):
        return self.transform(self.intensity(cheap))

    def __repr__(self) -> str:
        return f"GreedyRule(branch={self.transform.branch}, scale={self.transform.scale:.4g})"


# =============================================================================
# ESTRATEGIA
# =============================================================================

class LabellingStrategy:
    """
    Construye la regla de cada ola a partir del historial del estudio.

    Uso:
        strategy = LabellingStrategy(config, loss)
        for k in range(1, K + 1):
            rule = strategy.build_wave_rule(study, k)
            study = run_wave(study, k, rule)
    """

    def __init__(self, config: StrategyConfig, loss: LossModel):
        self.config = config
        self.loss = loss
        self._phase_one = None

    def build_wave_rule(self, study, k_star: int) -> LabelRule:
        if k_star < 1:
            raise ProtocolError(f"índice de ola inválido: {k_star}")
        design = study.design
        budget = design.wave_budgets[k_star - 1]

        if k_star == 1:
            return uniform_rule(budget, study.N, design.b_targ)

        unlabelled = ~study.labelled_mask
        n_unlabelled = int(unlabelled.sum())
        if self.config.kind == StrategyKind.UNIFORM:
            return self._uniform_remaining(budget, n_unlabelled, design.b_targ)

        try:
            rho_hat = self._fit_rho(study, k_star)
        except INTERIM_FAILURES as e:
            logger.warning(f"Ola {k_star}: ajuste interino fallido ({e.code}); respaldo uniforme")
            return self._uniform_remaining(budget, n_unlabelled, design.b_targ, fallback=e.code)

        intensity = greedy_init_rule(rho_hat, study.rules[:k_star - 1])
        cheap = study.proxy_matrix()
        transform = fit_budget_transform(intensity(cheap)[unlabelled], budget, design.b_targ)
        rule = GreedyRule(intensity, transform, labelled_probability=design.b_targ)
        logger.debug(f"Ola {k_star}: {rule!r} sobre |U|={n_unlabelled}")
        return rule

    def _uniform_remaining(self, budget, n_unlabelled, b_targ, fallback: Optional[str] = None):
        if n_unlabelled == 0 or not b_targ < budget / n_unlabelled < 1.0 - b_targ:
            raise BudgetInfeasibleError(
                f"presupuesto {budget} infactible para |U|={n_unlabelled} con b_targ={b_targ}"
            )
        return ConstantRule(budget / n_unlabelled, labelled_probability=b_targ,
                            fallback_reason=fallback)

    def _phase_one_fit(self, study):
        # gamma^I y H_gamma sólo dependen de la Fase I
        from engines.estimation_engine import fit_phase_one

        cheap = study.proxy_matrix()
        if self._phase_one is None or self._phase_one[0] is not cheap:
            gamma_I = fit_phase_one(self.loss, study).theta
            ordered = cheap[_value_order(cheap)]
            H_gamma = self.loss.weighted_hessian(gamma_I, ordered, np.ones(study.N))
            self._phase_one = (cheap, gamma_I, H_gamma)
        return self._phase_one[1], self._phase_one[2]

    def _fit_rho(self, study, k_star: int):
        gamma_I, H_gamma = self._phase_one_fit(study)
        fit = interim_fit(self.loss, study, k_star, gamma_I, H_gamma, self.config.target_coordinate,
                          tuning=self.config.psi_tuning)
        if self.config.kind == StrategyKind.GREEDY_STRATIFIED:
            return stratified_rho(self.config.strata, study, k_star, fit)
        features = study.proxy_matrix()[fit.unit_ids]
        return KNNRho(fit.unit_ids, features, fit.psi, self.config.k_neighbors)
