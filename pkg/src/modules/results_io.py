"""
Results IO - Persistencia CSV y lectura de estudios externos
=============================================================
- replications.csv: una fila por (replicación, brazo); columnas por parámetro
  con el sufijo ``__<parámetro>``.
- summary.csv: una fila por configuración (StudyMetrics).
- manifest.yaml: configuración efectiva + hash, semilla y versión. Es una
  configuración válida en sí misma.

Todos los números se escriben con 17 dígitos significativos.

Versión: 1.0
"""

import hashlib
import logging
import os
import sys
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from engines.sampling_engine import FeatureLayout, ObservedStudy, StudyDesign, WaveTrace
from modules.errors import SchemaError
from schemas.result_schemas import ReplicationResult, StudyMetrics

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
CSV_SCHEMA_VERSION = "1"
PER_PARAMETER = ("theta_mpd", "sigma_diag", "lower", "upper", "covered")


# =============================================================================
# TABLAS DE ENTRADA
# =============================================================================

def read_table(path: str, required: Sequence[str] = ()) -> pd.DataFrame:
    """
    Lee un CSV con cabecera y comprueba columnas y tipos numéricos.

    Los números de fila de los errores cuentan la cabecera como fila 1.

    Raises:
        SchemaError: Columna ausente o celda no numérica
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: faltan columnas {missing}", column=missing[0])

    numeric = {}
    for column in frame.columns:
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw.replace({"": np.nan, "NA": np.nan, "nan": np.nan, "NaN": np.nan}),
                               errors="coerce")
        bad = values.isna() & raw.ne("") & ~raw.isin(["NA", "nan", "NaN"])
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(
                f"{path}: valor no numérico {raw.iloc[row]!r} en la columna {column}, fila {row + 2}",
                row=row + 2, column=column,
            )
        numeric[column] = values.astype(float)
    return pd.DataFrame(numeric, columns=frame.columns)


def require_complete(frame: pd.DataFrame, columns: Sequence[str], rows: Optional[np.ndarray] = None,
                     label: str = "") -> None:
    """Exige valores finitos en ``columns`` (opcionalmente sólo en ``rows``)."""
    values = frame[list(columns)].to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if rows is not None:
        bad &= np.asarray(rows, dtype=bool)[:, None]
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise SchemaError(
            f"{label}valor ausente en la columna {columns[col]}, fila {int(row) + 2}",
            row=int(row) + 2, column=columns[col],
        )


def trace_from_frame(frame: pd.DataFrame) -> WaveTrace:
    """WaveTrace a partir de columnas pi_k, u_k, indicator_k (k = 1..K)."""
    K = 0
    while f"pi_{K + 1}" in frame.columns:
        K += 1
    if K == 0:
        raise SchemaError("la traza no tiene columnas pi_1..pi_K", column="pi_1")
    columns = {name: [f"{name}_{k}" for k in range(1, K + 1)] for name in ("pi", "u", "indicator")}
    missing = [c for cols in columns.values() for c in cols if c not in frame.columns]
    if missing:
        raise SchemaError(f"faltan columnas de traza {missing}", column=missing[0])
    for cols in columns.values():
        require_complete(frame, cols, label="traza: ")

    pi = frame[columns["pi"]].to_numpy(dtype=float)
    u = frame[columns["u"]].to_numpy(dtype=float)
    indicator = frame[columns["indicator"]].to_numpy(dtype=float)
    inconsistent = indicator != (u <= pi)
    if inconsistent.any():
        row, k = np.argwhere(inconsistent)[0]
        raise SchemaError(
            f"traza: indicator_{k + 1} no coincide con 1{{u <= pi}} en la fila {int(row) + 2}",
            row=int(row) + 2, column=f"indicator_{k + 1}",
        )
    trace = WaveTrace(pi=pi, u=u, indicator=indicator.astype(np.int8), waves_completed=K)
    for array in (trace.pi, trace.u, trace.indicator):
        array.setflags(write=False)
    return trace


def design_from_trace(trace: WaveTrace, c: Optional[Sequence[float]] = None) -> StudyDesign:
    """
    Diseño implícito de una traza externa.

    Los presupuestos son los recuentos esperados sum_{i en U_k} pi_ik sobre las
    unidades aún sin etiquetar en cada ola.
    """
    N, K = trace.pi.shape
    unlabelled = np.ones(N, dtype=bool)
    budgets = []
    for k in range(K):
        budgets.append(float(trace.pi[unlabelled, k].sum()) if unlabelled.any() else float(trace.pi[:, k].min()))
        unlabelled &= trace.indicator[:, k] == 0
    budgets = [max(b, 1e-12) for b in budgets]
    b_targ = 0.5 * min(float(trace.pi.min()), 1.0 - float(trace.pi.max()), min(budgets) / N)
    return StudyDesign.create(N, K, budgets, c=c, b_targ=b_targ)


def read_observed_study(data_path: str, layout: FeatureLayout, trace_path: Optional[str] = None,
                        weights_path: Optional[str] = None, weight_column: str = "weight",
                        c: Optional[Sequence[float]] = None) -> ObservedStudy:
    """
    Estudio observado a partir de un CSV de datos y una traza o pesos.

    Las variables caras sólo se exigen en las filas etiquetadas.
    """
    if (trace_path is None) == (weights_path is None):
        raise SchemaError("se necesita exactamente una fuente: traza o pesos")

    frame = read_table(data_path, list(layout.cheap_columns) + list(layout.expensive_names))
    require_complete(frame, list(layout.cheap_columns), label=f"{data_path}: ")
    cheap = frame[list(layout.cheap_columns)].to_numpy(dtype=float)
    expensive = frame[list(layout.expensive_names)].to_numpy(dtype=float)

    if trace_path is not None:
        trace_frame = frame if trace_path == data_path else read_table(trace_path)
        if len(trace_frame) != len(frame):
            raise SchemaError(f"la traza tiene {len(trace_frame)} filas y los datos {len(frame)}")
        trace = trace_from_frame(trace_frame)
        design = design_from_trace(trace, c)
        labelled = trace.indicator.any(axis=1)
        weights = None
    else:
        weight_frame = frame if weights_path == data_path else read_table(weights_path, [weight_column])
        if weight_column not in weight_frame.columns:
            raise SchemaError(f"falta la columna de pesos {weight_column}", column=weight_column)
        if len(weight_frame) != len(frame):
            raise SchemaError(f"los pesos tienen {len(weight_frame)} filas y los datos {len(frame)}")
        require_complete(weight_frame, [weight_column], label="pesos: ")
        weights = weight_frame[weight_column].to_numpy(dtype=float)
        negative = np.flatnonzero(weights < 0)
        if negative.size:
            raise SchemaError(f"peso negativo en la fila {int(negative[0]) + 2}",
                              row=int(negative[0]) + 2, column=weight_column)
        trace, design = None, None
        labelled = weights > 0

    require_complete(frame, list(layout.expensive_names), rows=labelled, label=f"{data_path}: ")
    cheap.setflags(write=False)
    expensive.setflags(write=False)
    logger.info(f"Estudio leído: N={len(frame)}, etiquetadas={int(labelled.sum())}")
    return ObservedStudy(
        cheap=cheap,
        _expensive=expensive,
        layout=layout,
        design=design,
        traces=trace,
        precomputed_weights=weights,
    )


# =============================================================================
# RESULTADOS
# =============================================================================

def replications_frame(results: Iterable[ReplicationResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        row = {
            "rep_index": result.rep_index,
            "arm": result.arm.value,
            "status": result.status.value,
            "reason": result.reason or "",
            "n_labelled": result.n_labelled,
            "n_phase_one": result.n_phase_one,
            "flags": ";".join(result.flags),
        }
        for field in PER_PARAMETER:
            for name, value in zip(result.parameter_names, getattr(result, field)):
                row[f"{field}__{name}"] = value
        rows.append(row)
    return pd.DataFrame(rows)


def write_replications(path: str, results: Sequence[ReplicationResult]) -> None:
    replications_frame(results).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_replications(path: str) -> List[ReplicationResult]:
    """Reconstruye los ReplicationResult de un replications.csv."""
    frame = pd.read_csv(path, keep_default_na=False, dtype={"reason": str, "flags": str, "arm": str})
    names = [c.split("__", 1)[1] for c in frame.columns if c.startswith("theta_mpd__")]
    results = []
    for _, row in frame.iterrows():
        ok = row["status"] == "ok"
        values = {field: [float(row[f"{field}__{n}"]) for n in names] if ok else []
                  for field in PER_PARAMETER}
        values["covered"] = [int(v) for v in values["covered"]]
        results.append(ReplicationResult(
            rep_index=int(row["rep_index"]),
            arm=row["arm"],
            status=row["status"],
            reason=row["reason"] or None,
            parameter_names=names if ok else [],
            n_labelled=int(row["n_labelled"]),
            n_phase_one=int(row["n_phase_one"]),
            flags=[f for f in str(row["flags"]).split(";") if f],
            **values,
        ))
    return results


def summary_frame(metrics: Sequence[StudyMetrics], labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    frame = pd.DataFrame([m.model_dump() for m in metrics])
    if labels is not None:
        frame.insert(0, "configuration", list(labels))
    return frame


def write_summary(path: str, metrics: Sequence[StudyMetrics], labels: Optional[Sequence[str]] = None) -> None:
    summary_frame(metrics, labels).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_frame(frame: pd.DataFrame, path: Optional[str] = None) -> None:
    """Escribe un DataFrame a un fichero o a stdout."""
    frame.to_csv(path if path else sys.stdout, index=False, float_format=FLOAT_FORMAT)


# =============================================================================
# MANIFIESTO
# =============================================================================

def config_hash(config: Dict) -> str:
    """SHA-256 del volcado YAML canónico (sin la sección manifest)."""
    clean = {k: v for k, v in config.items() if k != "manifest"}
    text = yaml.safe_dump(clean, sort_keys=True, default_flow_style=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(path: str, config: Dict, seed: int, version: str, target: Optional[str] = None,
                   oracle_theta: Optional[Sequence[float]] = None) -> Dict:
    """Escribe la configuración efectiva con su sección manifest."""
    document = {k: v for k, v in config.items() if k != "manifest"}
    document["manifest"] = {
        "config_hash": config_hash(document),
        "seed": int(seed),
        "version": version,
        "csv_schema": CSV_SCHEMA_VERSION,
    }
    if target is not None:
        document["manifest"]["target"] = target
    if oracle_theta is not None:
        document["manifest"]["oracle_theta"] = [float(v) for v in oracle_theta]
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(document, f, sort_keys=False, default_flow_style=False)
    return document


def prepare_output_dir(directory: str, force: bool = False) -> None:
    """Crea el directorio de salida; rechaza uno no vacío salvo con force."""
    if os.path.isdir(directory) and os.listdir(directory) and not force:
        raise FileExistsError(f"el directorio {directory} ya contiene resultados (use --force)")
    os.makedirs(directory, exist_ok=True)
