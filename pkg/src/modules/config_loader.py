"""
Config Loader - Lectura y resolución de la configuración
=========================================================
Carga el YAML, lo valida con los esquemas Pydantic y construye los objetos
de dominio (layout, pérdida, diseño, estrategia) con los valores por
defecto:

- n_targ^(1) = first_wave; n_targ^(k) = (n_targ - n_targ^(1)) / (K - 1), k >= 2
- c_k = n_targ^(k) / sum(n_targ)
- b_targ = min_{k>=2} n_targ^(k) / (100 N) (olas adaptativas; n_targ^(1) si K = 1)

Versión: 1.0
"""

import logging
import os
from typing import List, Optional

import numpy as np
import yaml
from pydantic import ValidationError

from engines.sampling_engine import FeatureLayout, StudyDesign
from modules.errors import ConfigurationError
from modules.losses import LossModel, build_loss, parameter_names
from modules.strategies import StrataSpec, StrategyConfig
from schemas.config_schemas import RunConfig

logger = logging.getLogger(__name__)


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<raíz>"
        parts.append(f"{path}: {item['msg']}")
    return "; ".join(parts)


def validate_config(data: dict, require_study: bool = True) -> RunConfig:
    """Valida un diccionario ya cargado."""
    if not isinstance(data, dict):
        raise ConfigurationError("la configuración debe ser un mapa clave-valor")
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(_format_validation_error(e))

    if require_study and config.study is None:
        raise ConfigurationError("study: sección obligatoria")
    source = config.superpopulation
    if source.source == "csv" and not os.path.isfile(source.path):
        raise ConfigurationError(f"superpopulation.path: no existe el fichero {source.path}")
    return config


def parse_config(path: str, require_study: bool = True) -> RunConfig:
    """
    Carga y valida un fichero de configuración YAML.

    Raises:
        ConfigurationError: Con la ruta de cada clave inválida
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: YAML inválido: {e}")
    config = validate_config(data or {}, require_study=require_study)
    logger.debug(f"Configuración cargada desde {path}")
    return config


def apply_overrides(config: RunConfig, seed: Optional[int] = None, reps: Optional[int] = None,
                    parallel=None, out: Optional[str] = None) -> RunConfig:
    """Aplica los flags del CLI y revalida."""
    data = config.dump()
    data.pop("manifest", None)
    if seed is not None:
        data.setdefault("study", {})["master_seed"] = seed
    if reps is not None:
        data.setdefault("simulation", {})["replications"] = reps
    if parallel is not None:
        data.setdefault("simulation", {})["parallel"] = parallel
    if out is not None:
        data.setdefault("output", {})["directory"] = out
    return validate_config(data, require_study=config.study is not None)


# =============================================================================
# OBJETOS DE DOMINIO
# =============================================================================

def build_layout(config: RunConfig) -> FeatureLayout:
    schema = config.schema_
    return FeatureLayout(tuple(schema.cheap), tuple(schema.expensive), tuple(schema.proxy))


def build_loss_model(config: RunConfig, layout: Optional[FeatureLayout] = None) -> LossModel:
    layout = layout or build_layout(config)
    section = config.loss
    return build_loss(section.kind, layout.logical_names, section.response, section.covariates,
                      intercept=section.intercept, tau=section.tau)


def target_index(config: RunConfig, loss: LossModel, layout: FeatureLayout) -> int:
    """Índice j del parámetro de interés (por defecto el último)."""
    names = parameter_names(loss, layout.logical_names)
    if config.loss.target is None:
        return len(names) - 1
    return names.index(config.loss.target)


def resolve_wave_budgets(config: RunConfig) -> List[float]:
    study = config.study
    if study.wave_budgets is not None:
        return [float(b) for b in study.wave_budgets]
    if study.K == 1:
        return [float(study.n_targ)]
    rest = (study.n_targ - study.first_wave) / (study.K - 1)
    return [float(study.first_wave)] + [rest] * (study.K - 1)


def build_design(config: RunConfig) -> StudyDesign:
    study = config.study
    return StudyDesign.create(
        N=study.N,
        K=study.K,
        wave_budgets=resolve_wave_budgets(config),
        c=study.c,
        b_targ=study.b_targ,
        master_seed=study.master_seed,
    )


def build_strategy_config(config: RunConfig, layout: FeatureLayout, loss: LossModel,
                          reference_cheap: Optional[np.ndarray] = None) -> StrategyConfig:
    """
    StrategyConfig con los estratos resueltos a índices de columna.

    Los cortes por cuantil se calculan sobre ``reference_cheap`` (la
    superpoblación en simulación).
    """
    section = config.strategy
    strata = None
    if section.strata is not None:
        columns = list(layout.cheap_columns)

        def column_index(name: str) -> int:
            if name not in columns:
                raise ConfigurationError(f"strategy.strata: {name!r} no es una columna barata")
            return columns.index(name)

        if section.strata.assignment is not None:
            strata = StrataSpec(assignment=column_index(section.strata.assignment))
        else:
            edges = {column_index(n): tuple(v) for n, v in section.strata.breakpoints.items()}
            for name, levels in section.strata.quantile_breakpoints.items():
                if reference_cheap is None:
                    raise ConfigurationError("quantile_breakpoints necesita una muestra de referencia")
                index = column_index(name)
                values = np.quantile(reference_cheap[:, index], levels)
                edges[index] = tuple(np.unique(values).tolist())
            strata = StrataSpec(breakpoints=edges)

    return StrategyConfig(
        kind=section.kind,
        target_coordinate=target_index(config, loss, layout),
        k_neighbors=section.k_neighbors,
        strata=strata,
        psi_tuning=section.psi_tuning,
    )
