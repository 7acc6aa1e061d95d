#!/usr/bin/env python3
"""
Tests de la interfaz
====================
- Carga y validación de la configuración YAML
- Comandos simulate, estimate, gen-data y report
- Códigos de salida y cierre configuración -> manifiesto -> reejecución

Ejecutar: python -m pytest tests/test_interface.py -v
"""

import hashlib
import io
import os
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import main as cli
from engines.simulation_engine import synthetic_table
from modules.config_loader import (
    apply_overrides,
    build_design,
    build_layout,
    build_loss_model,
    build_strategy_config,
    parse_config,
    resolve_wave_budgets,
    target_index,
)
from modules.errors import ConfigurationError
from modules.inference import TuningMode
from modules.strategies import StrategyKind

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "config")
SCHEMA = {"cheap": ["x"], "expensive": ["y"], "proxy": ["y_hat"]}
LOSS = {"kind": "linear_regression", "response": "y", "covariates": ["x"], "target": "x"}


def _write_yaml(path, data):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=False)
    return str(path)


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _simulation_config(tmp_path, out_dir, reps=3):
    return _write_yaml(tmp_path / "sim.yaml", {
        "study": {"N": 300, "K": 2, "n_targ": 60, "first_wave": 30, "master_seed": 5},
        "schema": {"cheap": ["y", "z_cov"], "expensive": ["z_trt"], "proxy": ["z_trt_proxy"]},
        "loss": {"kind": "linear_regression", "response": "y", "covariates": ["z_cov", "z_trt"],
                 "target": "z_trt"},
        "superpopulation": {"source": "synthetic", "n": 10000, "seed": 1},
        "strategy": {"kind": "greedy_knn", "k_neighbors": 10},
        "simulation": {"replications": reps, "parallel": 1},
        "output": {"directory": str(out_dir)},
    })


class TestParseConfig:
    """Validación y valores por defecto."""

    def test_minimal_defaults(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {
            "study": {"N": 1000, "K": 2, "n_targ": 100, "first_wave": 40},
            "schema": SCHEMA, "loss": LOSS,
        })
        config = parse_config(path)
        design = build_design(config)

        assert resolve_wave_budgets(config) == [40.0, 60.0]
        assert design.c == pytest.approx((0.4, 0.6))
        assert design.b_targ == pytest.approx(60 / (100 * 1000))
        assert config.estimation.tuning == "optimal"
        assert config.estimation.alpha == 0.10
        assert config.strategy.kind == "greedy_knn"

    def test_zero_waves(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {
            "study": {"N": 1000, "K": 0, "n_targ": 100}, "schema": SCHEMA, "loss": LOSS,
        })
        with pytest.raises(ConfigurationError) as excinfo:
            parse_config(path)
        assert "study.K" in str(excinfo.value)

    def test_unknown_key(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {
            "study": {"N": 1000, "K": 1, "n_targ": 100, "waves": 3}, "schema": SCHEMA, "loss": LOSS,
        })
        with pytest.raises(ConfigurationError) as excinfo:
            parse_config(path)
        assert "study.waves" in str(excinfo.value)

    def test_loss_variable_outside_schema(self, tmp_path):
        loss = dict(LOSS, covariates=["w"])
        path = _write_yaml(tmp_path / "c.yaml", {"schema": SCHEMA, "loss": loss})
        with pytest.raises(ConfigurationError):
            parse_config(path, require_study=False)

    def test_study_required_for_simulation(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {"schema": SCHEMA, "loss": LOSS})
        with pytest.raises(ConfigurationError):
            parse_config(path)
        assert parse_config(path, require_study=False).study is None

    def test_overrides_revalidate(self, tmp_path):
        config = parse_config(_simulation_config(tmp_path, tmp_path / "out"))
        updated = apply_overrides(config, seed=9, reps=7, parallel="auto")
        assert updated.study.master_seed == 9
        assert updated.simulation.replications == 7
        assert updated.simulation.parallel == "auto"
        with pytest.raises(ConfigurationError):
            apply_overrides(config, reps=0)

    def test_target_and_strata_resolution(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", {
            "schema": {"cheap": ["y", "z_cov"], "expensive": ["z_trt"], "proxy": ["z_trt_proxy"]},
            "loss": {"kind": "linear_regression", "response": "y", "covariates": ["z_cov", "z_trt"]},
            "strategy": {"kind": "greedy_stratified",
                         "strata": {"breakpoints": {"z_trt_proxy": [0.5]},
                                    "quantile_breakpoints": {"y": [0.5]}}},
        })
        config = parse_config(path, require_study=False)
        layout = build_layout(config)
        loss = build_loss_model(config, layout)
        reference = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])

        strategy = build_strategy_config(config, layout, loss, reference_cheap=reference)

        assert target_index(config, loss, layout) == 2
        assert strategy.kind == StrategyKind.GREEDY_STRATIFIED
        assert strategy.strata.breakpoints == {2: (0.5,), 0: (4.5,)}

    def test_bundled_configs_are_valid(self):
        for name in sorted(os.listdir(CONFIG_DIR)):
            if name.endswith(".yaml"):
                config = parse_config(os.path.join(CONFIG_DIR, name))
                build_design(config)

    def test_stratified_config_has_eighteen_strata(self):
        config = parse_config(os.path.join(CONFIG_DIR, "config_stratified.yaml"))
        layout = build_layout(config)
        loss = build_loss_model(config, layout)
        reference = synthetic_table(10_000, seed=1)[list(layout.cheap_columns)].to_numpy()

        strategy = build_strategy_config(config, layout, loss, reference_cheap=reference)

        assert strategy.strata.n_strata() == 18
        assert build_design(config).K == 6

    def test_many_waves_config(self):
        config = parse_config(os.path.join(CONFIG_DIR, "config_synthetic_k26.yaml"))
        design = build_design(config)
        assert resolve_wave_budgets(config) == [100.0] + [12.0] * 25
        assert design.b_targ == pytest.approx(12 / (100 * 4000))

    def test_psi_tuning_resolution(self, tmp_path):
        base = {"study": {"N": 1000, "K": 2, "n_targ": 100}, "schema": SCHEMA, "loss": LOSS}
        config = parse_config(_write_yaml(tmp_path / "a.yaml", base))
        layout = build_layout(config)
        loss = build_loss_model(config, layout)
        assert build_strategy_config(config, layout, loss).psi_tuning == TuningMode.OPTIMAL

        base["strategy"] = {"kind": "greedy_knn", "psi_tuning": "identity"}
        config = parse_config(_write_yaml(tmp_path / "b.yaml", base))
        assert build_strategy_config(config, layout, loss).psi_tuning == TuningMode.IDENTITY

        base["strategy"] = {"kind": "greedy_knn", "psi_tuning": "zero"}
        with pytest.raises(ConfigurationError) as excinfo:
            parse_config(_write_yaml(tmp_path / "c.yaml", base))
        assert "strategy.psi_tuning" in str(excinfo.value)


class TestGenData:
    """gen-data."""

    def test_header_and_stable_hash(self, tmp_path):
        a, b, c = (str(tmp_path / f"{name}.csv") for name in "abc")
        assert cli.main(["gen-data", "--n", "10000", "--seed", "4", "--out", a]) == 0
        assert cli.main(["gen-data", "--n", "10000", "--seed", "4", "--out", b]) == 0
        assert cli.main(["gen-data", "--n", "10000", "--seed", "5", "--out", c]) == 0

        with open(a, encoding="utf-8") as f:
            assert f.readline().strip() == "z_cov,z_trt,z_trt_proxy,y"
        assert _sha256(a) == _sha256(b)
        assert _sha256(a) != _sha256(c)
        assert len(pd.read_csv(a)) == 10000

    def test_too_small(self, tmp_path, capsys):
        code = cli.main(["gen-data", "--n", "100", "--out", str(tmp_path / "x.csv")])
        assert code == cli.EXIT_TOOLKIT
        assert "configuration:" in capsys.readouterr().err


class TestSimulateAndReport:
    """simulate y report sobre un estudio pequeño."""

    def test_writes_outputs_and_refuses_rerun(self, tmp_path):
        out = tmp_path / "run"
        config = _simulation_config(tmp_path, out)

        assert cli.main(["simulate", "--config", config]) == 0
        for name in ("replications.csv", "summary.csv", "manifest.yaml"):
            assert (out / name).is_file()

        frame = pd.read_csv(out / "replications.csv")
        assert len(frame) == 6
        assert set(frame["arm"]) == {"adaptive", "baseline"}
        assert "theta_mpd__z_trt" in frame.columns

        assert cli.main(["simulate", "--config", config]) == cli.EXIT_IO
        first = _sha256(out / "replications.csv")
        assert cli.main(["simulate", "--config", config, "--force", "--parallel", "2"]) == 0
        assert _sha256(out / "replications.csv") == first

    def test_zero_replications(self, tmp_path, capsys):
        config = _simulation_config(tmp_path, tmp_path / "run")
        assert cli.main(["simulate", "--config", config, "--reps", "0"]) == cli.EXIT_TOOLKIT
        assert "configuration:" in capsys.readouterr().err
        assert not (tmp_path / "run").exists()

    def test_manifest_reruns_identically(self, tmp_path):
        out, rerun = tmp_path / "run", tmp_path / "rerun"
        assert cli.main(["simulate", "--config", _simulation_config(tmp_path, out, reps=2)]) == 0

        with open(out / "manifest.yaml", encoding="utf-8") as f:
            manifest = yaml.safe_load(f)["manifest"]
        assert manifest["seed"] == 5
        assert manifest["target"] == "z_trt"
        assert len(manifest["oracle_theta"]) == 3

        assert cli.main(["simulate", "--config", str(out / "manifest.yaml"), "--out", str(rerun)]) == 0
        assert _sha256(rerun / "replications.csv") == _sha256(out / "replications.csv")
        rerun_summary = pd.read_csv(rerun / "summary.csv").drop(columns="configuration")
        assert rerun_summary.equals(pd.read_csv(out / "summary.csv").drop(columns="configuration"))

    def test_report(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(["simulate", "--config", _simulation_config(tmp_path, out, reps=2)]) == 0
        capsys.readouterr()

        assert cli.main(["report", str(out)]) == 0
        printed = pd.read_csv(io.StringIO(capsys.readouterr().out))
        written = pd.read_csv(out / "summary.csv")
        assert printed["coordinate"].tolist() == ["z_trt"]
        assert printed["rmse"].iloc[0] == pytest.approx(written["rmse"].iloc[0], rel=1e-12)

        target = tmp_path / "report.csv"
        assert cli.main(["report", str(out), "--out", str(target)]) == 0
        assert target.is_file()


class TestEstimate:
    """estimate sobre CSV externos."""

    CONFIG = {"schema": SCHEMA, "loss": LOSS, "estimation": {"alpha": 0.1}}

    def _data(self, N=400, seed=0, proxy_noise=0.5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=N)
        y = 1.0 + 2.0 * x + rng.normal(size=N)
        return pd.DataFrame({"x": x, "y_hat": y + proxy_noise * rng.normal(size=N), "y": y})

    def test_with_trace(self, tmp_path, capsys):
        frame = self._data()
        rng = np.random.default_rng(1)
        frame["pi_1"] = 0.3
        frame["u_1"] = rng.random(len(frame))
        frame["indicator_1"] = (frame["u_1"] <= frame["pi_1"]).astype(int)
        frame.loc[frame["indicator_1"] == 0, "y"] = np.nan
        data = tmp_path / "data.csv"
        frame.to_csv(data, index=False, float_format="%.17g")
        config = _write_yaml(tmp_path / "c.yaml", self.CONFIG)

        code = cli.main(["estimate", "--config", config, "--data", str(data), "--trace", str(data)])

        assert code == 0
        result = pd.read_csv(io.StringIO(capsys.readouterr().out))
        assert result["parameter"].tolist() == ["intercept", "x"]
        assert np.all(result["lower"] <= result["theta_mpd"])
        assert np.all(result["theta_mpd"] <= result["upper"])
        assert abs(result["theta_mpd"].iloc[1] - 2.0) < 0.5

    def test_all_labelled_matches_classical_fit(self, tmp_path, capsys):
        frame = self._data(seed=2, proxy_noise=0.0)
        frame["weight"] = 1.0
        data = tmp_path / "data.csv"
        frame.to_csv(data, index=False, float_format="%.17g")
        config = _write_yaml(tmp_path / "c.yaml", dict(self.CONFIG, estimation={"tuning": "identity"}))

        code = cli.main(["estimate", "--config", config, "--data", str(data), "--weights", str(data)])

        assert code == 0
        result = pd.read_csv(io.StringIO(capsys.readouterr().out))
        Z = np.column_stack([np.ones(len(frame)), frame["x"]])
        classical = np.linalg.lstsq(Z, frame["y"].to_numpy(), rcond=None)[0]
        assert np.allclose(result["theta_mpd"], classical, rtol=0, atol=1e-8)

    def test_missing_label_value(self, tmp_path, capsys):
        frame = self._data(N=50, seed=3)
        frame["weight"] = 2.0
        frame.loc[7, "y"] = np.nan
        data = tmp_path / "data.csv"
        frame.to_csv(data, index=False, float_format="%.17g")
        config = _write_yaml(tmp_path / "c.yaml", self.CONFIG)

        code = cli.main(["estimate", "--config", config, "--data", str(data), "--weights", str(data)])

        assert code == cli.EXIT_TOOLKIT
        err = capsys.readouterr().err
        assert "schema:" in err
        assert "fila 9" in err

    def test_missing_file(self, tmp_path):
        config = _write_yaml(tmp_path / "c.yaml", self.CONFIG)
        code = cli.main(["estimate", "--config", config, "--data", str(tmp_path / "none.csv"),
                         "--weights", str(tmp_path / "none.csv")])
        assert code == cli.EXIT_IO
