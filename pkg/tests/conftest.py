"""
Fixtures compartidas de los tests
=================================
- Añade src/ y la raíz del repositorio al path
- Marca ``slow`` para los estudios Monte Carlo de aceptación: se omiten
  salvo con ``--runslow`` o MPD_RUN_SLOW=1

Ejecutar: python -m pytest tests/ -v
          python -m pytest tests/ -v --runslow
"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.join(os.path.dirname(__file__), '..')
sys.path.insert(0, os.path.join(ROOT, 'src'))
sys.path.insert(0, ROOT)

from engines.sampling_engine import FeatureLayout, ObservedStudy, StudyDesign, run_wave  # noqa: E402
from modules.strategies import FixedRule  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Ejecuta los estudios Monte Carlo lentos")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: estudio Monte Carlo de varios minutos")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("MPD_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="usar --runslow o MPD_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# DATOS DE JUGUETE
# =============================================================================

# X~ = (x_c, x_p), X = (x_c, x_e)
TOY_LAYOUT = FeatureLayout(cheap_names=("x_c",), expensive_names=("x_e",), proxy_names=("x_p",))


@pytest.fixture
def toy_layout():
    return TOY_LAYOUT


@pytest.fixture
def toy_population():
    """Factoría (n, seed) -> (cheap n x 2, expensive n x 1) con proxy ruidosa."""
    def make(n: int, seed: int = 0, noise: float = 0.5):
        rng = np.random.default_rng(seed)
        x_c = rng.normal(size=n)
        x_e = 1.0 + 2.0 * x_c + rng.normal(size=n)
        x_p = x_e + noise * rng.normal(size=n)
        return np.column_stack([x_c, x_p]), x_e[:, None]
    return make


@pytest.fixture
def fixed_rules():
    """Tres reglas fijas no adaptativas dentro de [0.05, 0.95]."""
    def logistic(v):
        return 1.0 / (1.0 + np.exp(-v))

    return (
        FixedRule(lambda cheap: 0.10 + 0.30 * logistic(cheap[:, 0])),
        FixedRule(lambda cheap: 0.05 + 0.50 * logistic(cheap[:, 1] - 1.0)),
        FixedRule(lambda cheap: 0.20 + 0.60 * logistic(cheap[:, 0] * cheap[:, 1])),
    )


@pytest.fixture
def run_fixed_study():
    """Factoría que ejecuta todas las olas de un diseño con reglas dadas."""
    def run(cheap, expensive, layout, design: StudyDesign, rules, uniforms=None):
        study = ObservedStudy.fresh(cheap, expensive, layout, design)
        for k, rule in enumerate(rules, start=1):
            u = None if uniforms is None else uniforms[:, k - 1]
            study = run_wave(study, k, rule, uniforms=u)
        return study
    return run
