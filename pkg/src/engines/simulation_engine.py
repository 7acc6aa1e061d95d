"""
Simulation Engine - Estudios Monte Carlo
=========================================
Protocolo por replicación:
1. Fase I: N filas remuestreadas con reemplazo de la superpoblación.
2. Ola exploratoria uniforme y K-1 olas adaptativas.
3. Componentes, Omega, theta^MPD, Sigma^MPD e intervalos.
4. Cobertura frente al estimando oráculo de la superpoblación.
5. Baseline emparejado: la misma Fase I etiquetada con una única ola
   uniforme de n_targ / N.

Las replicaciones se ejecutan en paralelo (ThreadPoolExecutor); cada una usa
sus propios flujos aleatorios, así que el grado de paralelismo no cambia los
resultados. La agregación se hace en orden de rep_index.

Generador sintético:
    eps_Y = e1 + 10 Z_trt e2 + |Z_cov| e3 + 3 Z_trt |Z_cov| e4
    Y     = 2 Z_cov + eps_Y            (outcome "literal")
          = Z_cov + Z_trt + eps_Y      (outcome "trt")
    xi    = 4 Z_trt + Z_cov + Y / sd(Y) - mu
    Z_trt_proxy = 1{U <= logistic(xi)}

Versión: 1.0
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import psutil
from scipy.special import expit

from engines.estimation_engine import EstimateReport, estimate_mpd, solve_weighted_m
from engines.sampling_engine import FeatureLayout, ObservedStudy, StudyDesign, run_wave
from modules.errors import ConfigurationError, MPDError, SchemaError
from modules.losses import LossModel, build_loss, parameter_names
from modules.results_io import read_table, require_complete
from modules.rng_streams import BASELINE_WAVE, PHASE_ONE, SUPERPOPULATION, stream, wave_uniforms
from modules.strategies import LabellingStrategy, StrategyConfig, uniform_rule
from modules.study_metrics import aggregate_metrics
from schemas.result_schemas import Arm, ReplicationResult, StudyMetrics

logger = logging.getLogger(__name__)

SYNTHETIC_COLUMNS = ("z_cov", "z_trt", "z_trt_proxy", "y")
SYNTHETIC_LAYOUT = FeatureLayout(cheap_names=("y", "z_cov"), expensive_names=("z_trt",),
                                 proxy_names=("z_trt_proxy",))
MIN_SYNTHETIC_ROWS = 10_000


# =============================================================================
# SUPERPOBLACIÓN
# =============================================================================

@dataclass(frozen=True, eq=False)
class Superpopulation:
    """Tabla completa cuya distribución empírica define theta_0."""
    table: pd.DataFrame
    layout: FeatureLayout
    loss: LossModel
    oracle_theta: np.ndarray

    @classmethod
    def build(cls, table: pd.DataFrame, layout: FeatureLayout, loss: LossModel) -> "Superpopulation":
        superpop = cls(table=table, layout=layout, loss=loss, oracle_theta=np.empty(0))
        return replace(superpop, oracle_theta=oracle_estimand(superpop, loss))

    @property
    def size(self) -> int:
        return len(self.table)

    @cached_property
    def cheap(self) -> np.ndarray:
        return self.table[list(self.layout.cheap_columns)].to_numpy(dtype=float)

    @cached_property
    def expensive(self) -> np.ndarray:
        return self.table[list(self.layout.expensive_names)].to_numpy(dtype=float)

    @cached_property
    def gold(self) -> np.ndarray:
        return self.table[list(self.layout.logical_names)].to_numpy(dtype=float)


def synthetic_table(n: int, seed: int, outcome: str = "literal") -> pd.DataFrame:
    """Genera la tabla sintética con columnas z_cov, z_trt, z_trt_proxy, y."""
    if n < MIN_SYNTHETIC_ROWS:
        raise ConfigurationError(f"la superpoblación sintética necesita n >= {MIN_SYNTHETIC_ROWS} (recibido {n})")
    if outcome not in ("literal", "trt"):
        raise ConfigurationError(f"outcome desconocido: {outcome!r}")

    rng = stream(seed, 0, SUPERPOPULATION)
    z_cov = rng.standard_normal(n)
    z_trt = (rng.random(n) < 0.5).astype(float)
    e1, e2, e3, e4 = rng.standard_normal((4, n))
    u = rng.random(n)

    abs_cov = np.abs(z_cov)
    eps_y = e1 + 10.0 * z_trt * e2 + abs_cov * e3 + 3.0 * z_trt * abs_cov * e4
    if outcome == "literal":
        y = z_cov + z_cov + eps_y
    else:
        y = z_cov + z_trt + eps_y

    signal = 4.0 * z_trt + z_cov + y / np.std(y, ddof=1)
    xi = signal - signal.mean()
    proxy = (u <= expit(xi)).astype(float)

    return pd.DataFrame({"z_cov": z_cov, "z_trt": z_trt, "z_trt_proxy": proxy, "y": y},
                        columns=list(SYNTHETIC_COLUMNS))


def default_synthetic_loss(layout: FeatureLayout = SYNTHETIC_LAYOUT) -> LossModel:
    """Regresión lineal y ~ 1 + z_cov + z_trt."""
    return build_loss("linear_regression", layout.logical_names, "y", ["z_cov", "z_trt"])


def synthetic_superpopulation(n: int, seed: int, outcome: str = "literal",
                              loss: Optional[LossModel] = None,
                              layout: FeatureLayout = SYNTHETIC_LAYOUT) -> Superpopulation:
    table = synthetic_table(n, seed, outcome)
    loss = loss or default_synthetic_loss(layout)
    logger.info(f"Superpoblación sintética: n={n}, seed={seed}, outcome={outcome}")
    return Superpopulation.build(table, layout, loss)


def load_superpopulation(path: str, layout: FeatureLayout, loss: LossModel) -> Superpopulation:
    """
    Carga una superpoblación completa desde CSV.

    Raises:
        SchemaError: Columnas ausentes, celdas no numéricas o filas incompletas
    """
    columns = list(layout.cheap_columns) + list(layout.expensive_names)
    table = read_table(path, columns)
    require_complete(table, columns, label=f"{path}: ")
    if len(table) == 0:
        raise SchemaError(f"{path}: tabla vacía")
    logger.info(f"Superpoblación cargada desde {path}: {len(table)} filas")
    return Superpopulation.build(table, layout, loss)


def oracle_estimand(superpop: Superpopulation, loss: LossModel) -> np.ndarray:
    """M-estimación no ponderada sobre todas las filas."""
    gold = superpop.gold
    return solve_weighted_m(loss, gold, np.ones(gold.shape[0]))


# =============================================================================
# REPLICACIONES
# =============================================================================

@dataclass(frozen=True)
class ReplicationSettings:
    """Parámetros de estimación compartidos por todas las replicaciones."""
    tuning: str = "optimal"
    alpha: float = 0.10
    ridge: Optional[float] = None
    constant_omega: Optional[Sequence[Sequence[float]]] = None
    baseline: bool = True


@dataclass(frozen=True, eq=False)
class ReplicationOutcome:
    adaptive: ReplicationResult
    baseline: Optional[ReplicationResult] = None
    report: Optional[EstimateReport] = None


def phase_one_sample(superpop: Superpopulation, design: StudyDesign) -> ObservedStudy:
    """Remuestreo con reemplazo de N filas con el flujo de la replicación."""
    rng = stream(design.master_seed, design.replication, PHASE_ONE)
    rows = rng.integers(0, superpop.size, size=design.N)
    return ObservedStudy.fresh(superpop.cheap[rows], superpop.expensive[rows], superpop.layout, design)


def _result_from_report(report: EstimateReport, oracle_theta, rep_index: int, arm: Arm,
                        flags: Sequence[str]) -> ReplicationResult:
    lower = [ci.lower for ci in report.intervals]
    upper = [ci.upper for ci in report.intervals]
    return ReplicationResult(
        rep_index=rep_index,
        arm=arm,
        parameter_names=list(report.parameter_names),
        theta_mpd=report.theta_mpd.tolist(),
        sigma_diag=report.sigma.diagonal.tolist(),
        lower=lower,
        upper=upper,
        covered=[int(lo <= t <= hi) for lo, t, hi in zip(lower, oracle_theta, upper)],
        n_labelled=report.n_labelled,
        n_phase_one=report.N,
        flags=sorted(set(flags) | set(report.flags)),
    )


def _estimate(study: ObservedStudy, superpop: Superpopulation, settings: ReplicationSettings,
              names) -> EstimateReport:
    return estimate_mpd(superpop.loss, study, tuning=settings.tuning, alpha=settings.alpha,
                        constant_omega=settings.constant_omega, ridge=settings.ridge,
                        parameter_names=names)


def run_adaptive_arm(study: ObservedStudy, strategy: LabellingStrategy) -> ObservedStudy:
    """Ejecuta las K olas con la estrategia; registra los respaldos como flags."""
    for k in range(1, study.design.K + 1):
        rule = strategy.build_wave_rule(study, k)
        if rule.fallback_reason:
            study = study.with_flag(f"fallback_wave_{k}:{rule.fallback_reason}")
        study = run_wave(study, k, rule)
    return study


def run_baseline_arm(phase_one: ObservedStudy) -> ObservedStudy:
    """Una ola uniforme n_targ / N sobre la misma Fase I."""
    design = phase_one.design
    baseline_design = StudyDesign.create(
        N=design.N, K=1, wave_budgets=[design.n_targ], b_targ=design.b_targ,
        master_seed=design.master_seed, replication=design.replication,
    )
    study = replace(phase_one, design=baseline_design,
                    traces=phase_one.traces.empty(design.N, 1), rules=(), flags=())
    uniforms = wave_uniforms(design.master_seed, design.replication, 1, design.N, channel=BASELINE_WAVE)
    rule = uniform_rule(design.n_targ, design.N, design.b_targ)
    return run_wave(study, 1, rule, uniforms=uniforms)


def run_replication(superpop: Superpopulation, design: StudyDesign, strategy_config: StrategyConfig,
                    loss: LossModel, rep_index: int,
                    settings: ReplicationSettings = ReplicationSettings()) -> ReplicationOutcome:
    """
    Una replicación completa (adaptativa y, opcionalmente, baseline).

    Los fallos duros no se propagan: se devuelven como resultados
    ``failed`` con el código del error.
    """
    design = replace(design, replication=rep_index)
    names = parameter_names(loss, superpop.layout.logical_names)
    if loss is not superpop.loss:
        superpop = Superpopulation.build(superpop.table, superpop.layout, loss)
    phase_one = phase_one_sample(superpop, design)

    report, flags = None, []
    try:
        study = run_adaptive_arm(phase_one, LabellingStrategy(strategy_config, loss))
        flags = list(study.flags)
        report = _estimate(study, superpop, settings, names)
        adaptive = _result_from_report(report, superpop.oracle_theta, rep_index, Arm.ADAPTIVE, flags)
    except MPDError as e:
        logger.error(f"Replicación {rep_index} (adaptativa) fallida: {e.describe()}")
        adaptive = ReplicationResult.failed(rep_index, Arm.ADAPTIVE, e.code, flags)

    baseline = None
    if settings.baseline:
        try:
            study_b = run_baseline_arm(phase_one)
            report_b = _estimate(study_b, superpop, settings, names)
            baseline = _result_from_report(report_b, superpop.oracle_theta, rep_index, Arm.BASELINE, [])
        except MPDError as e:
            logger.error(f"Replicación {rep_index} (baseline) fallida: {e.describe()}")
            baseline = ReplicationResult.failed(rep_index, Arm.BASELINE, e.code)

    return ReplicationOutcome(adaptive=adaptive, baseline=baseline, report=report)


def resolve_parallelism(parallel) -> int:
    """'auto' = núcleos disponibles."""
    if parallel == "auto":
        return max(1, psutil.cpu_count(logical=True) or 1)
    return max(1, int(parallel))


@dataclass(eq=False)
class MonteCarloOutcome:
    adaptive: List[ReplicationResult]
    baseline: List[ReplicationResult]
    metrics: StudyMetrics
    oracle_theta: np.ndarray
    reports: List[Optional[EstimateReport]] = field(default_factory=list)

    @property
    def results(self) -> List[ReplicationResult]:
        """Filas en orden (rep_index, brazo)."""
        rows = []
        for i, result in enumerate(self.adaptive):
            rows.append(result)
            if self.baseline:
                rows.append(self.baseline[i])
        return rows


class SimulationEngine:
    """
    Motor Monte Carlo: ejecuta replicaciones en paralelo y agrega métricas.
    """

    def __init__(self, superpop: Superpopulation, design: StudyDesign, strategy_config: StrategyConfig,
                 settings: ReplicationSettings = ReplicationSettings(), parallel=1):
        self.superpop = superpop
        self.design = design
        self.strategy_config = strategy_config
        self.settings = settings
        self.max_workers = resolve_parallelism(parallel)

    def run(self, replications: int, keep_reports: bool = False) -> MonteCarloOutcome:
        if replications < 1:
            raise ConfigurationError(f"replications debe ser >= 1 (recibido {replications})")

        logger.info(
            f"🔄 Estudio Monte Carlo: {replications} replicaciones, K={self.design.K}, "
            f"N={self.design.N}, estrategia={self.strategy_config.kind.value}, workers={self.max_workers}"
        )
        start_time = time.time()
        outcomes = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_rep = {
                executor.submit(run_replication, self.superpop, self.design, self.strategy_config,
                                self.superpop.loss, rep, self.settings): rep
                for rep in range(replications)
            }
            for done, future in enumerate(as_completed(future_to_rep), start=1):
                rep = future_to_rep[future]
                outcomes[rep] = future.result()
                if done % max(1, replications // 10) == 0:
                    logger.info(f"   {done}/{replications} replicaciones completadas")

        ordered = [outcomes[rep] for rep in sorted(outcomes)]
        adaptive = [o.adaptive for o in ordered]
        baseline = [o.baseline for o in ordered if o.baseline is not None]
        metrics = aggregate_metrics(adaptive, baseline or None, self.superpop.oracle_theta,
                                    self.strategy_config.target_coordinate)

        elapsed = time.time() - start_time
        logger.info(f"✅ Estudio completado en {elapsed:.1f}s")
        return MonteCarloOutcome(
            adaptive=adaptive,
            baseline=baseline,
            metrics=metrics,
            oracle_theta=self.superpop.oracle_theta,
            reports=[o.report for o in ordered] if keep_reports else [],
        )
