"""
Study Metrics - Métricas de estudios Monte Carlo
=================================================
Agrega replicaciones emparejadas (adaptativa vs baseline uniforme) en:
- RMSE y cobertura de la coordenada objetivo
- Ratio de tamaño muestral efectivo por pareja:
      (ancho_base / ancho_adapt)^2 * (n_adapt / n_base)
  y su versión sin ajuste por número de etiquetas
- Asimetría y exceso de curtosis de theta_j
- Calibración de varianza: mean(Sigma_jj / N) / Var_emp(theta_j)

Versión: 1.0
"""

import logging
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from modules.errors import PairingError
from schemas.result_schemas import ReplicationResult, StudyMetrics

logger = logging.getLogger(__name__)


def _rmse(estimates: np.ndarray, truth: float) -> Optional[float]:
    if estimates.size == 0:
        return None
    return float(np.sqrt(np.mean((estimates - truth) ** 2)))


def _coverage(results: Sequence[ReplicationResult], truth: float, j: int) -> Optional[float]:
    if not results:
        return None
    return float(np.mean([r.lower[j] <= truth <= r.upper[j] for r in results]))


def _mean_width(results: Sequence[ReplicationResult], j: int) -> Optional[float]:
    if not results:
        return None
    return float(np.mean([r.ci_width[j] for r in results]))


def aggregate_metrics(adaptive: Sequence[ReplicationResult],
                      baseline: Optional[Sequence[ReplicationResult]],
                      oracle_theta, j: int) -> StudyMetrics:
    """
    Métricas de la coordenada j.

    Args:
        adaptive: Resultados del brazo adaptativo
        baseline: Resultados del baseline (mismos rep_index) o None
        oracle_theta: Estimando oráculo
        j: Coordenada objetivo

    Raises:
        PairingError: Si los rep_index de ambos brazos no coinciden
    """
    truth = float(np.atleast_1d(oracle_theta)[j])
    adaptive = sorted(adaptive, key=lambda r: r.rep_index)
    baseline = sorted(baseline or [], key=lambda r: r.rep_index)

    if baseline:
        adaptive_ids = [r.rep_index for r in adaptive]
        baseline_ids = [r.rep_index for r in baseline]
        if adaptive_ids != baseline_ids:
            missing = sorted(set(adaptive_ids) ^ set(baseline_ids))
            raise PairingError(f"replicaciones sin pareja: {missing[:10]}")

    ok = [r for r in adaptive if r.ok]
    ok_base = [r for r in baseline if r.ok]
    coordinate = ok[0].parameter_names[j] if ok else f"theta_{j}"
    estimates = np.array([r.theta_mpd[j] for r in ok])

    metrics = {
        "coordinate": coordinate,
        "n_replications": len(adaptive),
        "rmse": _rmse(estimates, truth),
        "coverage": _coverage(ok, truth, j),
        "mean_width": _mean_width(ok, j),
        "baseline_rmse": _rmse(np.array([r.theta_mpd[j] for r in ok_base]), truth),
        "baseline_coverage": _coverage(ok_base, truth, j),
        "baseline_mean_width": _mean_width(ok_base, j),
        "n_flagged": sum(1 for r in adaptive if r.flags),
        "n_failed": sum(1 for r in adaptive if not r.ok) + sum(1 for r in baseline if not r.ok),
    }

    if estimates.size >= 3 and np.ptp(estimates) > 0:
        metrics["skewness"] = float(stats.skew(estimates))
        metrics["excess_kurtosis"] = float(stats.kurtosis(estimates, fisher=True))
    if estimates.size >= 2:
        empirical = float(np.var(estimates, ddof=1))
        predicted = float(np.mean([r.sigma_diag[j] / r.n_phase_one for r in ok]))
        if empirical > 0:
            metrics["variance_calibration"] = predicted / empirical

    if baseline:
        pairs = [(a, b) for a, b in zip(adaptive, baseline)
                 if a.ok and b.ok and a.ci_width[j] > 0 and b.n_labelled > 0]
        dropped = sum(1 for a, b in zip(adaptive, baseline) if a.ok and b.ok) - len(pairs)
        if dropped:
            logger.warning(f"{dropped} parejas con ancho nulo excluidas del ratio ESS")
        if pairs:
            unadjusted = np.array([(b.ci_width[j] / a.ci_width[j]) ** 2 for a, b in pairs])
            labels = np.array([a.n_labelled / b.n_labelled for a, b in pairs])
            metrics["ess_ratio"] = float(np.mean(unadjusted * labels))
            metrics["ess_ratio_unadjusted"] = float(np.mean(unadjusted))

    result = StudyMetrics(**metrics)
    logger.info(
        f"Métricas [{coordinate}]: RMSE={result.rmse} cobertura={result.coverage} "
        f"ESS={result.ess_ratio} (sin ajuste {result.ess_ratio_unadjusted})"
    )
    return result
