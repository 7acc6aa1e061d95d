"""
Config Schemas - Validación de la configuración con Pydantic
=============================================================
Esquema de los ficheros YAML de config/. Las claves desconocidas se
rechazan (extra="forbid"). Los valores por defecto derivados (c_k, b_targ,
presupuestos por ola) se resuelven en modules/config_loader.py.

Versión: 1.0
"""

from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StudySection(StrictModel):
    """Diseño del estudio."""
    N: int = Field(..., ge=1, description="Tamaño de Fase I")
    K: int = Field(..., ge=1, description="Número de olas")
    n_targ: Optional[float] = Field(default=None, gt=0, description="Etiquetas esperadas totales")
    first_wave: Optional[float] = Field(default=None, gt=0, description="n_targ^(1) (ola exploratoria)")
    wave_budgets: Optional[List[float]] = Field(default=None, description="n_targ^(k) explícitos")
    c: Optional[List[float]] = Field(default=None, description="Mezcla de olas")
    b_targ: Optional[float] = Field(default=None, gt=0, lt=0.5)
    master_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_budgets(self):
        if self.wave_budgets is not None:
            if len(self.wave_budgets) != self.K:
                raise ValueError(f"wave_budgets tiene {len(self.wave_budgets)} valores para K={self.K}")
            if any(b <= 0 for b in self.wave_budgets):
                raise ValueError("wave_budgets deben ser > 0")
        elif self.n_targ is None:
            raise ValueError("se necesita n_targ o wave_budgets")
        elif self.K > 1:
            if self.first_wave is None:
                raise ValueError("first_wave es obligatorio con K > 1")
            if self.first_wave >= self.n_targ:
                raise ValueError("first_wave debe ser menor que n_targ")
        if self.c is not None and len(self.c) != self.K:
            raise ValueError(f"c tiene {len(self.c)} valores para K={self.K}")
        return self


class SchemaSection(StrictModel):
    """Roles de las columnas."""
    cheap: List[str] = Field(default_factory=list)
    expensive: List[str] = Field(..., min_length=1)
    proxy: List[str] = Field(..., min_length=1)

    @model_validator(mode="after")
    def check_pairs(self):
        if len(self.expensive) != len(self.proxy):
            raise ValueError("expensive y proxy deben tener la misma longitud")
        return self


class LossSection(StrictModel):
    kind: Literal["mean", "quantile", "linear_regression", "logistic_regression"]
    response: str
    covariates: List[str] = Field(default_factory=list)
    intercept: bool = True
    tau: float = Field(default=0.5, gt=0, lt=1)
    target: Optional[str] = Field(default=None, description="Parámetro de interés (j)")

    @model_validator(mode="after")
    def check_covariates(self):
        regression = self.kind in ("linear_regression", "logistic_regression")
        if regression and not self.covariates and not self.intercept:
            raise ValueError("una regresión necesita covariables o intercepto")
        if not regression and self.covariates:
            raise ValueError(f"la pérdida {self.kind} no admite covariables")
        return self


class SuperpopulationSection(StrictModel):
    source: Literal["synthetic", "csv"] = "synthetic"
    n: int = Field(default=100000, ge=10000)
    seed: int = Field(default=0, ge=0)
    outcome: Literal["literal", "trt"] = "literal"
    path: Optional[str] = None

    @model_validator(mode="after")
    def check_source(self):
        if self.source == "csv" and not self.path:
            raise ValueError("source=csv necesita path")
        return self


class StrataSection(StrictModel):
    breakpoints: Dict[str, List[float]] = Field(default_factory=dict)
    quantile_breakpoints: Dict[str, List[float]] = Field(default_factory=dict)
    assignment: Optional[str] = None

    @field_validator("quantile_breakpoints")
    @classmethod
    def check_levels(cls, v):
        for column, levels in v.items():
            if any(not 0 < q < 1 for q in levels):
                raise ValueError(f"niveles de cuantil fuera de (0, 1) en {column}")
        return v

    @model_validator(mode="after")
    def check_one_kind(self):
        by_edges = bool(self.breakpoints) or bool(self.quantile_breakpoints)
        if by_edges == (self.assignment is not None):
            raise ValueError("use breakpoints/quantile_breakpoints o assignment (sólo uno)")
        return self


class StrategySection(StrictModel):
    kind: Literal["uniform", "greedy_knn", "greedy_stratified"] = "greedy_knn"
    k_neighbors: int = Field(default=20, ge=1)
    strata: Optional[StrataSection] = None
    psi_tuning: Literal["optimal", "identity"] = "optimal"

    @model_validator(mode="after")
    def check_strata(self):
        if self.kind == "greedy_stratified" and self.strata is None:
            raise ValueError("greedy_stratified necesita strata")
        return self


class EstimationSection(StrictModel):
    tuning: Literal["optimal", "identity", "zero", "constant"] = "optimal"
    omega: Optional[List[List[float]]] = None
    ridge: Optional[float] = Field(default=None, ge=0)
    alpha: float = Field(default=0.10, gt=0, lt=1)

    @model_validator(mode="after")
    def check_omega(self):
        if self.tuning == "constant" and self.omega is None:
            raise ValueError("tuning=constant necesita omega")
        return self


class SimulationSection(StrictModel):
    replications: int = Field(default=100, ge=1)
    parallel: Union[int, Literal["auto"]] = 1
    baseline: bool = True

    @field_validator("parallel")
    @classmethod
    def check_parallel(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("parallel debe ser >= 1 o 'auto'")
        return v


class OutputSection(StrictModel):
    directory: str = "results"


class LoggingSection(StrictModel):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    file: Optional[str] = None
    backup_count: int = Field(default=30, ge=0)


class ManifestSection(StrictModel):
    config_hash: str
    seed: int
    version: str
    csv_schema: str = "1"
    target: Optional[str] = None
    oracle_theta: Optional[List[float]] = None


class RunConfig(StrictModel):
    """Configuración completa de una ejecución."""
    study: Optional[StudySection] = None
    schema_: SchemaSection = Field(..., alias="schema")
    loss: LossSection
    superpopulation: SuperpopulationSection = Field(default_factory=SuperpopulationSection)
    strategy: StrategySection = Field(default_factory=StrategySection)
    estimation: EstimationSection = Field(default_factory=EstimationSection)
    simulation: SimulationSection = Field(default_factory=SimulationSection)
    output: OutputSection = Field(default_factory=OutputSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)
    manifest: Optional[ManifestSection] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def check_names(self):
        names = self.schema_.cheap + self.schema_.expensive
        referenced = [self.loss.response] + self.loss.covariates
        unknown = [n for n in referenced if n not in names]
        if unknown:
            raise ValueError(f"la pérdida usa variables fuera del esquema: {unknown}")
        if self.loss.target is not None:
            allowed = (["intercept"] if self.loss.intercept else []) + self.loss.covariates
            if self.loss.kind in ("mean", "quantile"):
                allowed = [self.loss.response]
            if self.loss.target not in allowed:
                raise ValueError(f"target {self.loss.target!r} no es un parámetro de la pérdida")
        return self

    def dump(self) -> dict:
        """Diccionario serializable con los nombres de clave del YAML."""
        return self.model_dump(mode="json", by_alias=True, exclude_none=True)
