"""
Result Schemas - Modelos de resultados de simulación
=====================================================
Define los esquemas Pydantic de una replicación (una fila por replicación y
brazo en replications.csv) y de las métricas agregadas (summary.csv).

Versión: 1.0
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class Arm(str, Enum):
    """Brazo del diseño emparejado."""
    ADAPTIVE = "adaptive"
    BASELINE = "baseline"


class ReplicationStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


class ReplicationResult(BaseModel):
    """Resultado de un brazo en una replicación."""
    rep_index: int = Field(..., ge=0)
    arm: Arm = Arm.ADAPTIVE
    status: ReplicationStatus = ReplicationStatus.OK
    reason: Optional[str] = Field(default=None, description="Código del error si falló")
    parameter_names: List[str] = Field(default_factory=list)
    theta_mpd: List[float] = Field(default_factory=list)
    sigma_diag: List[float] = Field(default_factory=list)
    lower: List[float] = Field(default_factory=list)
    upper: List[float] = Field(default_factory=list)
    covered: List[int] = Field(default_factory=list)
    n_labelled: int = Field(default=0, ge=0)
    n_phase_one: int = Field(default=0, ge=0)
    flags: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_lengths(self):
        d = len(self.parameter_names)
        for name in ("theta_mpd", "sigma_diag", "lower", "upper", "covered"):
            values = getattr(self, name)
            if self.status == ReplicationStatus.OK and len(values) != d:
                raise ValueError(f"{name} tiene {len(values)} valores para {d} parámetros")
        for lo, hi in zip(self.lower, self.upper):
            if lo > hi:
                raise ValueError(f"intervalo invertido [{lo}, {hi}]")
        return self

    @property
    def ok(self) -> bool:
        return self.status == ReplicationStatus.OK

    @property
    def ci_width(self) -> List[float]:
        return [hi - lo for lo, hi in zip(self.lower, self.upper)]

    @classmethod
    def failed(cls, rep_index: int, arm: Arm, reason: str, flags: Optional[List[str]] = None
               ) -> "ReplicationResult":
        return cls(rep_index=rep_index, arm=arm, status=ReplicationStatus.FAILED,
                   reason=reason, flags=flags or [])


class StudyMetrics(BaseModel):
    """Métricas de un estudio Monte Carlo para la coordenada objetivo."""
    coordinate: str
    n_replications: int = Field(..., ge=0)
    rmse: Optional[float] = None
    coverage: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    ess_ratio: Optional[float] = None
    ess_ratio_unadjusted: Optional[float] = None
    skewness: Optional[float] = None
    excess_kurtosis: Optional[float] = None
    variance_calibration: Optional[float] = None
    mean_width: Optional[float] = None
    baseline_rmse: Optional[float] = None
    baseline_coverage: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    baseline_mean_width: Optional[float] = None
    n_flagged: int = 0
    n_failed: int = 0
