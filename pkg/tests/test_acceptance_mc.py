#!/usr/bin/env python3
"""
Estudios Monte Carlo de aceptación
==================================
Escala de escritorio (N=4000, n_targ=400) sobre la superpoblación sintética:
- Cobertura del intervalo al 90% en la coordenada del tratamiento (K=2)
- Calibración de la varianza y forma normal de la distribución
- Optimalidad de Omega en cada replicación
- Ganancia de tamaño muestral efectivo con K=6 frente al baseline uniforme
- Determinismo byte a byte con cualquier grado de paralelismo

Son lentos (varios minutos): se omiten salvo con --runslow.

Ejecutar: python -m pytest tests/test_acceptance_mc.py -v --runslow
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from engines.simulation_engine import ReplicationSettings, SimulationEngine, synthetic_superpopulation
from modules.config_loader import (
    apply_overrides,
    build_design,
    build_layout,
    build_loss_model,
    build_strategy_config,
    parse_config,
)
from modules.inference import TuningMatrix, mpd_covariance
from modules.results_io import replications_frame

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')

pytestmark = pytest.mark.slow


def _engine(name, parallel="auto", **overrides):
    config = parse_config(os.path.join(CONFIG_DIR, name))
    config = apply_overrides(config, parallel=parallel, **overrides)
    layout = build_layout(config)
    loss = build_loss_model(config, layout)
    source = config.superpopulation
    superpop = synthetic_superpopulation(source.n, source.seed, source.outcome, loss=loss, layout=layout)
    strategy = build_strategy_config(config, layout, loss, reference_cheap=superpop.cheap)
    estimation = config.estimation
    settings = ReplicationSettings(tuning=estimation.tuning, alpha=estimation.alpha, ridge=estimation.ridge,
                                   baseline=config.simulation.baseline)
    engine = SimulationEngine(superpop, build_design(config), strategy, settings, config.simulation.parallel)
    return engine, config.simulation.replications


@pytest.fixture(scope="module")
def two_wave_study():
    """500 replicaciones de config_synthetic.yaml (K=2, kNN)."""
    engine, reps = _engine("config_synthetic.yaml")
    return engine, engine.run(reps, keep_reports=True)


class TestCoverageAndShape:
    """K=2, kNN, 500 replicaciones."""

    def test_no_failures(self, two_wave_study):
        _, outcome = two_wave_study
        assert outcome.metrics.n_failed == 0
        assert outcome.metrics.n_replications == 500

    def test_coverage(self, two_wave_study):
        _, outcome = two_wave_study
        assert 0.86 <= outcome.metrics.coverage <= 0.94

    def test_variance_calibration(self, two_wave_study):
        _, outcome = two_wave_study
        assert 0.8 <= outcome.metrics.variance_calibration <= 1.25

    def test_normal_shape(self, two_wave_study):
        _, outcome = two_wave_study
        assert abs(outcome.metrics.skewness) < 0.3
        assert abs(outcome.metrics.excess_kurtosis) < 0.6

    def test_optimal_tuning_on_every_replication(self, two_wave_study):
        _, outcome = two_wave_study
        assert len(outcome.reports) == 500
        for report in outcome.reports:
            d = report.theta_mpd.size
            optimal = report.sigma.diagonal
            for alternative in (TuningMatrix.identity(d), TuningMatrix.zero(d)):
                other = mpd_covariance(report.covariance, alternative).diagonal
                assert np.all(optimal <= other + 1e-9)


class TestEfficiencyGain:
    """K=6 adaptativo frente al baseline uniforme emparejado."""

    def test_ess_and_rmse(self):
        engine, reps = _engine("config_synthetic_k6.yaml")
        metrics = engine.run(reps).metrics

        assert metrics.n_failed == 0
        assert metrics.ess_ratio > 1.1
        assert metrics.rmse < metrics.baseline_rmse


class TestDeterminism:
    """Salidas idénticas con cualquier número de hilos."""

    @pytest.mark.parametrize("name", ["config_synthetic_k6.yaml", "config_stratified.yaml"])
    def test_parallelism_invariance(self, name):
        texts = []
        for parallel in (1, 4, 1):
            engine, _ = _engine(name, parallel=parallel)
            outcome = engine.run(20)
            texts.append(replications_frame(outcome.results).to_csv(index=False, float_format="%.17g"))
        assert texts[0] == texts[1] == texts[2]
