#!/usr/bin/env python3
"""
MPD Sampling - Muestreo adaptativo multiola y estimación Predict-Then-Debias
============================================================================
Herramienta de línea de comandos:

    simulate  Estudio Monte Carlo (replications.csv, summary.csv, manifest.yaml)
    estimate  Estimación MPD sobre un estudio real (CSV a stdout)
    gen-data  Genera la superpoblación sintética
    report    Tabla resumen de uno o varios directorios de resultados

Códigos de salida: 0 éxito, 2 error del toolkit ("<código>: <mensaje>" en
stderr), 3 error de E/S.

Variables de entorno (también desde .env):
    MPD_LOG     Nivel de log (DEBUG, INFO, WARNING, ERROR)
    MPD_CONFIG  Configuración por defecto de simulate/estimate

Versión: 1.0.0
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Agregar el directorio src al path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from engines.estimation_engine import estimate_mpd
from engines.simulation_engine import (
    ReplicationSettings,
    SimulationEngine,
    Superpopulation,
    load_superpopulation,
    synthetic_table,
)
from modules.config_loader import (
    apply_overrides,
    build_design,
    build_layout,
    build_loss_model,
    build_strategy_config,
    parse_config,
    target_index,
)
from modules.errors import ConfigurationError, MPDError
from modules.losses import parameter_names
from modules.results_io import (
    FLOAT_FORMAT,
    prepare_output_dir,
    read_observed_study,
    read_replications,
    summary_frame,
    write_frame,
    write_manifest,
    write_replications,
    write_summary,
)
from modules.study_metrics import aggregate_metrics
from schemas.result_schemas import Arm

VERSION = "1.0.0"
DEFAULT_CONFIG = "config/config_synthetic.yaml"
EXIT_OK, EXIT_TOOLKIT, EXIT_IO = 0, 2, 3

logger = logging.getLogger("mpd")


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None, backup_count: int = 30):
    """
    Configura el logging: consola (con color si colorlog está instalado) y,
    opcionalmente, fichero con rotación diaria.
    """
    from logging.handlers import TimedRotatingFileHandler

    level = (os.environ.get('MPD_LOG') or level or 'INFO').upper()
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    date_format = '%Y-%m-%d %H:%M:%S'

    console_handler = logging.StreamHandler(sys.stderr)
    try:
        import colorlog
        console_handler.setFormatter(colorlog.ColoredFormatter(
            '%(log_color)s' + log_format, date_format,
            log_colors={'DEBUG': 'cyan', 'INFO': 'green', 'WARNING': 'yellow', 'ERROR': 'red'},
        ))
    except ImportError:
        console_handler.setFormatter(logging.Formatter(log_format, date_format))
    handlers = [console_handler]

    if log_file:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        file_handler = TimedRotatingFileHandler(
            filename=log_file,
            when='midnight',
            interval=1,
            backupCount=backup_count,
            encoding='utf-8'
        )
        file_handler.setFormatter(logging.Formatter(log_format, date_format))
        file_handler.suffix = '%Y-%m-%d'
        handlers.append(file_handler)

    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=log_format,
                        datefmt=date_format, handlers=handlers, force=True)


def _config_path(path: Optional[str]) -> str:
    return path or os.environ.get('MPD_CONFIG', DEFAULT_CONFIG)


def _load_superpopulation(config, layout, loss) -> Superpopulation:
    source = config.superpopulation
    if source.source == "csv":
        return load_superpopulation(source.path, layout, loss)
    table = synthetic_table(source.n, source.seed, source.outcome)
    missing = [c for c in list(layout.cheap_columns) + list(layout.expensive_names) if c not in table.columns]
    if missing:
        raise ConfigurationError(f"schema: columnas inexistentes en la superpoblación sintética: {missing}")
    return Superpopulation.build(table, layout, loss)


# =============================================================================
# COMANDOS
# =============================================================================

def cmd_simulate(args) -> int:
    """Estudio Monte Carlo completo."""
    config = parse_config(_config_path(args.config))
    config = apply_overrides(config, seed=args.seed, reps=args.reps, parallel=args.parallel, out=args.out)
    setup_logging(config.logging.level, config.logging.file, config.logging.backup_count)

    out_dir = config.output.directory
    prepare_output_dir(out_dir, force=args.force)

    layout = build_layout(config)
    loss = build_loss_model(config, layout)
    design = build_design(config)
    superpop = _load_superpopulation(config, layout, loss)
    strategy_config = build_strategy_config(config, layout, loss, reference_cheap=superpop.cheap)
    estimation = config.estimation
    settings = ReplicationSettings(
        tuning=estimation.tuning,
        alpha=estimation.alpha,
        ridge=estimation.ridge,
        constant_omega=estimation.omega,
        baseline=config.simulation.baseline,
    )

    print(f"""
    ╔═══════════════════════════════════════════════════════════════╗
    ║     MPD Sampling v{VERSION:<44}║
    ║     Estrategia: {strategy_config.kind.value:<46}║
    ║     N={design.N:<8} K={design.K:<5} n_targ={design.n_targ:<29g}║
    ║     Replicaciones: {config.simulation.replications:<43}║
    ╚═══════════════════════════════════════════════════════════════╝
    """, file=sys.stderr)

    engine = SimulationEngine(superpop, design, strategy_config, settings, config.simulation.parallel)
    outcome = engine.run(config.simulation.replications)

    names = parameter_names(loss, layout.logical_names)
    write_replications(os.path.join(out_dir, "replications.csv"), outcome.results)
    write_summary(os.path.join(out_dir, "summary.csv"), [outcome.metrics], labels=[out_dir])
    write_manifest(os.path.join(out_dir, "manifest.yaml"), config.dump(), seed=design.master_seed,
                   version=VERSION, target=names[strategy_config.target_coordinate],
                   oracle_theta=outcome.oracle_theta)
    logger.info(f"Resultados escritos en {out_dir}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    """Estimación MPD de un estudio externo; CSV por stdout."""
    config = parse_config(_config_path(args.config), require_study=False)
    setup_logging(config.logging.level, config.logging.file, config.logging.backup_count)

    layout = build_layout(config)
    loss = build_loss_model(config, layout)
    c = config.study.c if config.study is not None else None
    study = read_observed_study(args.data, layout, trace_path=args.trace, weights_path=args.weights,
                                weight_column=args.weight_column, c=c)
    estimation = config.estimation
    alpha = args.alpha if args.alpha is not None else estimation.alpha
    report = estimate_mpd(loss, study, tuning=estimation.tuning, alpha=alpha,
                          constant_omega=estimation.omega, ridge=estimation.ridge,
                          parameter_names=parameter_names(loss, layout.logical_names))
    for flag in report.flags:
        logger.warning(f"Diagnóstico: {flag}")
    write_frame(report.to_frame())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    """Escribe la superpoblación sintética."""
    setup_logging()
    if args.kind != "synthetic":
        raise ConfigurationError(f"tipo de datos desconocido: {args.kind}")
    table = synthetic_table(args.n, args.seed, args.outcome)
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table.to_csv(args.out, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Superpoblación sintética ({args.n} filas) escrita en {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Resumen de uno o varios directorios de simulate."""
    setup_logging()
    metrics, labels = [], []
    for directory in args.dirs:
        config = parse_config(os.path.join(directory, "manifest.yaml"))
        manifest = config.manifest
        if manifest is None or manifest.oracle_theta is None:
            raise ConfigurationError(f"{directory}: manifest.yaml sin estimando oráculo")
        layout = build_layout(config)
        loss = build_loss_model(config, layout)
        results = read_replications(os.path.join(directory, "replications.csv"))
        adaptive = [r for r in results if r.arm == Arm.ADAPTIVE]
        baseline = [r for r in results if r.arm == Arm.BASELINE]
        j = target_index(config, loss, layout)
        metrics.append(aggregate_metrics(adaptive, baseline or None, manifest.oracle_theta, j))
        labels.append(directory)

    if args.out:
        write_summary(args.out, metrics, labels)
    else:
        write_frame(summary_frame(metrics, labels))
    return EXIT_OK


def _parallel(value: str):
    return value if value == "auto" else int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpd",
        description="Muestreo adaptativo multiola y estimación Predict-Then-Debias",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Estudio Monte Carlo")
    simulate.add_argument("--config", help="Fichero YAML (por defecto MPD_CONFIG)")
    simulate.add_argument("--out", help="Directorio de resultados")
    simulate.add_argument("--seed", type=int, help="Semilla maestra")
    simulate.add_argument("--reps", type=int, help="Número de replicaciones")
    simulate.add_argument("--parallel", type=_parallel, help="Hilos (entero o 'auto')")
    simulate.add_argument("--force", action="store_true", help="Sobrescribir el directorio de salida")
    simulate.set_defaults(handler=cmd_simulate)

    estimate = sub.add_parser("estimate", help="Estimación MPD de un estudio")
    estimate.add_argument("--config", help="YAML con schema, loss y estimation")
    estimate.add_argument("--data", required=True, help="CSV con variables baratas, proxies y caras")
    source = estimate.add_mutually_exclusive_group(required=True)
    source.add_argument("--trace", help="CSV con pi_k, u_k, indicator_k (puede ser el mismo --data)")
    source.add_argument("--weights", help="CSV con una columna de pesos precalculados")
    estimate.add_argument("--weight-column", default="weight")
    estimate.add_argument("--alpha", type=float, help="Nivel de los intervalos (por defecto el de la config)")
    estimate.set_defaults(handler=cmd_estimate)

    gen_data = sub.add_parser("gen-data", help="Genera la superpoblación sintética")
    gen_data.add_argument("--kind", default="synthetic")
    gen_data.add_argument("--n", type=int, default=100000)
    gen_data.add_argument("--seed", type=int, default=0)
    gen_data.add_argument("--outcome", choices=["literal", "trt"], default="literal")
    gen_data.add_argument("--out", required=True)
    gen_data.set_defaults(handler=cmd_gen_data)

    report = sub.add_parser("report", help="Resumen de directorios de resultados")
    report.add_argument("dirs", nargs="+")
    report.add_argument("--out", help="CSV de salida (por defecto stdout)")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Función principal."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except MPDError as e:
        print(e.describe(), file=sys.stderr)
        return EXIT_TOOLKIT
    except OSError as e:
        print(f"io: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
