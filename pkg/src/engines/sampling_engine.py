"""
Sampling Engine - Muestreo adaptativo multiola en dos fases
============================================================
Ejecuta el esquema de Bernoulli multiola y calcula los pesos de probabilidad
inversa:

- Fase I: se observan las variables baratas X~ = (X^c, X~^e) de N unidades.
- Fase II: K olas; en la ola k cada unidad se sortea con probabilidad
  pi^(k)(X~_i) usando un uniforme propio U_i^(k). Las unidades ya medidas
  no se vuelven a medir.

Pesos por ola:
    W_i^(k) = prod_{j<k} (1 - I_i^(j)) / (1 - pi^(j)(X~_i)) * I_i^(k) / pi^(k)(X~_i)
Peso agregado:
    W_i = sum_k c_k W_i^(k)

Las variables caras X^e sólo se pueden leer en unidades etiquetadas; el
acceso a una unidad sin etiqueta lanza UnlabelledAccessError. Así las
simulaciones conservan la verdad completa sin que los estimadores puedan
verla.

Versión: 1.0
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from modules.errors import (
    ConfigurationError,
    DivisionSafetyError,
    OverlapViolationError,
    ProtocolError,
    SchemaError,
    UnlabelledAccessError,
)
from modules.rng_streams import wave_uniforms

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


# =============================================================================
# TIPOS DE DOMINIO
# =============================================================================

@dataclass(frozen=True)
class FeatureLayout:
    """
    Nombres de columnas por rol.

    ``proxy_names[i]`` es la estimación barata de ``expensive_names[i]``. El
    vector lógico X = (X^c, X^e) y el barato X~ = (X^c, X~^e) comparten el
    orden ``cheap_names + expensive_names``.
    """
    cheap_names: Tuple[str, ...]
    expensive_names: Tuple[str, ...]
    proxy_names: Tuple[str, ...]

    def __post_init__(self):
        if len(self.expensive_names) != len(self.proxy_names):
            raise ConfigurationError(
                "cada variable cara necesita exactamente una proxy "
                f"({len(self.expensive_names)} caras vs {len(self.proxy_names)} proxies)"
            )
        names = list(self.cheap_names) + list(self.expensive_names) + list(self.proxy_names)
        duplicated = sorted({n for n in names if names.count(n) > 1})
        if duplicated:
            raise ConfigurationError(f"columnas duplicadas en el layout: {duplicated}")

    @property
    def logical_names(self) -> Tuple[str, ...]:
        return tuple(self.cheap_names) + tuple(self.expensive_names)

    @property
    def cheap_columns(self) -> Tuple[str, ...]:
        """Columnas del vector barato X~ tal y como se almacenan."""
        return tuple(self.cheap_names) + tuple(self.proxy_names)

    @property
    def p(self) -> int:
        return len(self.cheap_names) + len(self.expensive_names)

    @property
    def n_cheap_only(self) -> int:
        return len(self.cheap_names)


@dataclass(frozen=True, eq=False)
class UnitRecord:
    """Una unidad de la muestra de Fase I."""
    id: int
    cheap: np.ndarray
    _expensive: np.ndarray = field(repr=False)
    labelled_wave: Optional[int] = None
    n_cheap_only: int = 0

    @property
    def is_labelled(self) -> bool:
        return self.labelled_wave is not None

    @property
    def expensive(self) -> np.ndarray:
        """X^e de la unidad; sólo legible si fue etiquetada."""
        if self.labelled_wave is None:
            raise UnlabelledAccessError(f"la unidad {self.id} no ha sido etiquetada")
        return self._expensive

    @property
    def gold(self) -> np.ndarray:
        """X = (X^c, X^e)."""
        return np.concatenate([self.cheap[:self.n_cheap_only], self.expensive])


@dataclass(frozen=True, eq=False)
class WaveTrace:
    """
    Traza por (unidad, ola): probabilidad, uniforme e indicador.

    Las columnas de olas aún no ejecutadas contienen NaN (pi, u) y 0.
    """
    pi: np.ndarray
    u: np.ndarray
    indicator: np.ndarray
    waves_completed: int = 0

    @classmethod
    def empty(cls, n_units: int, n_waves: int) -> "WaveTrace":
        return cls(
            pi=_frozen(np.full((n_units, n_waves), np.nan)),
            u=_frozen(np.full((n_units, n_waves), np.nan)),
            indicator=_frozen(np.zeros((n_units, n_waves), dtype=np.int8)),
            waves_completed=0,
        )

    def labelled_wave(self) -> np.ndarray:
        """Primera ola con indicador 1 (1-based), 0 si nunca."""
        if self.waves_completed == 0:
            return np.zeros(self.indicator.shape[0], dtype=int)
        hit = self.indicator[:, :self.waves_completed].astype(bool)
        first = np.argmax(hit, axis=1) + 1
        return np.where(hit.any(axis=1), first, 0)

    def with_wave(self, k: int, pi: np.ndarray, u: np.ndarray, indicator: np.ndarray) -> "WaveTrace":
        new_pi, new_u, new_ind = np.array(self.pi), np.array(self.u), np.array(self.indicator)
        new_pi[:, k - 1] = pi
        new_u[:, k - 1] = u
        new_ind[:, k - 1] = indicator
        return WaveTrace(_frozen(new_pi), _frozen(new_u), _frozen(new_ind), waves_completed=k)


@dataclass(frozen=True, eq=False)
class MultiwaveWeights:
    """Pesos por ola (N x K), agregados (N) y la mezcla c."""
    wave_weights: np.ndarray
    aggregated: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class StudyDesign:
    """Diseño del estudio: tamaño, olas, presupuestos, mezcla y solapamiento."""
    N: int
    K: int
    wave_budgets: Tuple[float, ...]
    c: Tuple[float, ...]
    b_targ: float
    master_seed: int = 0
    replication: int = 0

    @classmethod
    def create(
        cls,
        N: int,
        K: int,
        wave_budgets: Sequence[float],
        c: Optional[Sequence[float]] = None,
        b_targ: Optional[float] = None,
        master_seed: int = 0,
        replication: int = 0,
    ) -> "StudyDesign":
        """
        Crea y valida un diseño rellenando los valores por defecto.

        Defaults:
            c_k = n_targ^(k) / sum(n_targ)
            b_targ = min_{k>=2} n_targ^(k) / (100 * N)  (con K = 1, n_targ^(1))
        """
        if K < 1:
            raise ConfigurationError(f"K debe ser >= 1 (recibido {K})")
        budgets = tuple(float(b) for b in wave_budgets)
        if len(budgets) != K:
            raise ConfigurationError(f"se esperaban {K} presupuestos por ola, hay {len(budgets)}")
        if any(b <= 0 for b in budgets):
            raise ConfigurationError(f"los presupuestos deben ser > 0: {budgets}")
        if c is None:
            total = sum(budgets)
            c = tuple(b / total for b in budgets)
        if b_targ is None:
            adaptive = budgets[1:] or budgets
            b_targ = min(adaptive) / (100.0 * N)
        design = cls(int(N), int(K), budgets, tuple(float(x) for x in c), float(b_targ),
                     int(master_seed), int(replication))
        design.validate()
        return design

    def validate(self):
        if self.N < 1:
            raise ConfigurationError(f"N debe ser >= 1 (recibido {self.N})")
        if not 0 < self.b_targ < 0.5:
            raise ConfigurationError(f"b_targ debe estar en (0, 1/2): {self.b_targ}")
        for k, budget in enumerate(self.wave_budgets, start=1):
            if not self.b_targ < budget / self.N:
                raise ConfigurationError(
                    f"b_targ={self.b_targ} debe ser < n_targ^({k})/N = {budget / self.N}"
                )
        check_mixture(self.c, self.K)

    @property
    def n_targ(self) -> float:
        return float(sum(self.wave_budgets))

    @property
    def max_weight(self) -> float:
        return self.b_targ ** (-self.K)


def check_mixture(c: Sequence[float], K: int) -> np.ndarray:
    """Valida que c sea una mezcla de probabilidad de longitud K."""
    c = np.asarray(c, dtype=float)
    if c.shape != (K,):
        raise ConfigurationError(f"c debe tener {K} componentes (tiene {c.size})")
    if np.any(c < 0) or np.any(c > 1) or not np.isclose(c.sum(), 1.0, rtol=0, atol=1e-12):
        raise ConfigurationError(f"c no es una mezcla de probabilidad: {c.tolist()}")
    return c


# =============================================================================
# ESTUDIO OBSERVADO
# =============================================================================

@dataclass(frozen=True, eq=False)
class ObservedStudy:
    """
    Datos observados tras Fase I y las olas ejecutadas hasta el momento.

    Es inmutable: ``run_wave`` devuelve un estudio nuevo.
    """
    cheap: np.ndarray
    _expensive: np.ndarray = field(repr=False)
    layout: FeatureLayout = None
    design: StudyDesign = None
    traces: Optional[WaveTrace] = None
    rules: Tuple = ()
    flags: Tuple[str, ...] = ()
    precomputed_weights: Optional[np.ndarray] = None

    @classmethod
    def fresh(cls, cheap: np.ndarray, expensive: np.ndarray, layout: FeatureLayout,
              design: StudyDesign) -> "ObservedStudy":
        """Estudio tras la Fase I, sin olas ejecutadas."""
        cheap = np.asarray(cheap, dtype=float)
        expensive = np.asarray(expensive, dtype=float)
        if expensive.ndim == 1:
            expensive = expensive[:, None]
        if cheap.shape != (design.N, len(layout.cheap_columns)):
            raise SchemaError(
                f"matriz barata con forma {cheap.shape}, se esperaba "
                f"({design.N}, {len(layout.cheap_columns)})"
            )
        if expensive.shape != (design.N, len(layout.expensive_names)):
            raise SchemaError(f"matriz cara con forma {expensive.shape}")
        bad = np.flatnonzero(~np.isfinite(cheap).all(axis=1))
        if bad.size:
            raise SchemaError(f"variables baratas no finitas en la unidad {int(bad[0])}", row=int(bad[0]))
        return cls(
            cheap=_frozen(cheap),
            _expensive=_frozen(expensive),
            layout=layout,
            design=design,
            traces=WaveTrace.empty(design.N, design.K),
        )

    @property
    def N(self) -> int:
        return self.cheap.shape[0]

    @property
    def waves_completed(self) -> int:
        return self.traces.waves_completed if self.traces is not None else 0

    @cached_property
    def labelled_wave(self) -> np.ndarray:
        """Ola de etiquetado por unidad (0 = nunca)."""
        if self.traces is None:
            return np.where(self.precomputed_weights > 0, 1, 0)
        return self.traces.labelled_wave()

    @property
    def labelled_mask(self) -> np.ndarray:
        return self.labelled_wave > 0

    @property
    def labelled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labelled_mask)

    @property
    def n_labelled(self) -> int:
        return int(self.labelled_mask.sum())

    def unit(self, i: int) -> UnitRecord:
        wave = int(self.labelled_wave[i])
        return UnitRecord(
            id=int(i),
            cheap=self.cheap[i],
            _expensive=self._expensive[i],
            labelled_wave=wave if wave > 0 else None,
            n_cheap_only=self.layout.n_cheap_only,
        )

    @property
    def units(self) -> Tuple[UnitRecord, ...]:
        return tuple(self.unit(i) for i in range(self.N))

    def proxy_matrix(self) -> np.ndarray:
        """X~ de todas las unidades."""
        return self.cheap

    def gold_matrix(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """
        X = (X^c, X^e) de las unidades indicadas (por defecto las etiquetadas).

        Raises:
            UnlabelledAccessError: Si alguna unidad pedida no está etiquetada
        """
        if indices is None:
            indices = self.labelled_indices
        indices = np.asarray(indices, dtype=int)
        unlabelled = indices[~self.labelled_mask[indices]]
        if unlabelled.size:
            raise UnlabelledAccessError(f"la unidad {int(unlabelled[0])} no ha sido etiquetada")
        cheap_only = self.cheap[indices, :self.layout.n_cheap_only]
        return np.column_stack([cheap_only, self._expensive[indices]])

    def wave_weights(self, n_waves: Optional[int] = None) -> np.ndarray:
        """W_i^(k) para las olas 1..n_waves (por defecto las completadas)."""
        n_waves = self.waves_completed if n_waves is None else n_waves
        if n_waves > self.waves_completed:
            raise ProtocolError(f"sólo hay {self.waves_completed} olas completadas")
        return compute_wave_weights(self.traces, n_waves)

    @cached_property
    def weights(self) -> MultiwaveWeights:
        """Pesos multiola del estudio completo."""
        if self.precomputed_weights is not None:
            w = np.asarray(self.precomputed_weights, dtype=float)
            return MultiwaveWeights(w[:, None], w, np.ones(1))
        if self.traces.waves_completed != self.design.K:
            raise ProtocolError(
                f"el estudio tiene {self.traces.waves_completed} de {self.design.K} olas"
            )
        wave = compute_wave_weights(self.traces, self.design.K)
        c = np.asarray(self.design.c)
        return MultiwaveWeights(wave, aggregate_weights(wave, c), c)

    def with_flag(self, flag: str) -> "ObservedStudy":
        return replace(self, flags=self.flags + (flag,))


# =============================================================================
# OPERACIONES
# =============================================================================

def run_wave(study: ObservedStudy, k: int, rule, rng: Optional[np.random.Generator] = None,
             uniforms: Optional[np.ndarray] = None) -> ObservedStudy:
    """
    Ejecuta la ola k con la regla dada.

    Args:
        study: Estudio con las olas 1..k-1 ya ejecutadas
        k: Índice de ola (1-based)
        rule: Regla de etiquetado (``probabilities(cheap)`` y
            ``labelled_probability`` opcional para unidades ya etiquetadas)
        rng: Generador para los uniformes (por defecto el flujo de la ola)
        uniforms: Uniformes explícitos (tests de simetría)

    Returns:
        Nuevo ObservedStudy con la ola registrada
    """
    design = study.design
    if k != study.traces.waves_completed + 1 or k > design.K:
        raise ProtocolError(
            f"ola {k} fuera de orden (completadas {study.traces.waves_completed} de {design.K})"
        )

    already = study.labelled_mask
    probs = np.array(rule.probabilities(study.cheap), dtype=float)
    fixed = getattr(rule, "labelled_probability", None)
    if fixed is not None:
        probs[already] = fixed

    b = design.b_targ
    outside = np.flatnonzero((probs < b) | (probs > 1.0 - b) | ~np.isfinite(probs))
    if outside.size:
        i = int(outside[0])
        raise OverlapViolationError(
            f"ola {k}: pi={probs[i]!r} en la unidad {i} fuera de [{b}, {1 - b}]"
        )

    if uniforms is None:
        if rng is None:
            uniforms = wave_uniforms(design.master_seed, design.replication, k, study.N)
        else:
            uniforms = rng.random(study.N)
    uniforms = np.asarray(uniforms, dtype=float)
    if uniforms.shape != (study.N,):
        raise ProtocolError(f"se esperaban {study.N} uniformes, hay {uniforms.shape}")

    indicator = (uniforms <= probs).astype(np.int8)
    traces = study.traces.with_wave(k, probs, uniforms, indicator)
    new_study = replace(study, traces=traces, rules=study.rules + (rule,))

    newly = int((indicator.astype(bool) & ~already).sum())
    logger.debug(
        f"Ola {k}/{design.K}: {newly} nuevas etiquetas "
        f"(esperadas {probs[~already].sum():.1f}, total {new_study.n_labelled})"
    )
    return new_study


def _wave_weight_matrix(pi: np.ndarray, indicator: np.ndarray) -> np.ndarray:
    """Núcleo compartido por los pesos observados y los oráculo."""
    ind = indicator.astype(float)
    ratio = (1.0 - ind) / (1.0 - pi)
    survival = np.ones_like(pi)
    if pi.shape[1] > 1:
        survival[:, 1:] = np.cumprod(ratio[:, :-1], axis=1)
    return survival * ind / pi


def compute_wave_weights(traces: WaveTrace, K: int) -> np.ndarray:
    """
    Matriz N x K de W_i^(k).

    Raises:
        ProtocolError: Si la traza no cubre las K olas
        DivisionSafetyError: Si algún pi está fuera de (0, 1)
    """
    if traces.waves_completed < K:
        raise ProtocolError(f"traza incompleta: {traces.waves_completed} de {K} olas")
    pi = traces.pi[:, :K]
    if not np.all((pi > 0) & (pi < 1)):
        raise DivisionSafetyError("probabilidades de etiquetado fuera de (0, 1)")
    return _wave_weight_matrix(pi, traces.indicator[:, :K])


def aggregate_weights(wave_weights: np.ndarray, c: Sequence[float]) -> np.ndarray:
    """W_i = sum_k c_k W_i^(k)."""
    wave_weights = np.asarray(wave_weights, dtype=float)
    c = check_mixture(c, wave_weights.shape[1])
    return (wave_weights * c).sum(axis=1)


def oracle_iid_weights(study: ObservedStudy, fixed_rules: Sequence, c: Optional[Sequence[float]] = None
                       ) -> np.ndarray:
    """
    Pesos oráculo i.i.d. W-bar_i con reglas límite fijas y los mismos uniformes.

    Sólo para tests: con reglas no adaptativas coinciden bit a bit con W_i.
    """
    K = len(fixed_rules)
    if study.traces.waves_completed < K:
        raise ProtocolError(f"la traza no cubre {K} olas")
    pi_bar = np.column_stack([np.asarray(r.probabilities(study.cheap), dtype=float) for r in fixed_rules])
    if not np.all((pi_bar > 0) & (pi_bar < 1)):
        raise DivisionSafetyError("reglas límite fuera de (0, 1)")
    indicator = (study.traces.u[:, :K] <= pi_bar).astype(np.int8)
    c = study.design.c if c is None else c
    return aggregate_weights(_wave_weight_matrix(pi_bar, indicator), c)


def cumulative_selection_prob(rules: Sequence, cheap: np.ndarray) -> np.ndarray:
    """
    pi^(k)(x~) * prod_{j<k} (1 - pi^(j)(x~)) con k = len(rules).

    Acepta un vector (una unidad) o una matriz de vectores baratos.
    """
    if len(rules) < 1:
        raise ProtocolError("se necesita al menos una regla")
    cheap = np.asarray(cheap, dtype=float)
    single = cheap.ndim == 1
    if single:
        cheap = cheap[None, :]
    result = np.asarray(rules[-1].probabilities(cheap), dtype=float).copy()
    for rule in rules[:-1]:
        result *= 1.0 - np.asarray(rule.probabilities(cheap), dtype=float)
    return float(result[0]) if single else result
