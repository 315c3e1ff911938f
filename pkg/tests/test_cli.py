import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from backend.cli import EXIT_ASSUMPTION, EXIT_IO, EXIT_OK, main
from backend.config_loader import ConfigError, config_from_mapping, load_config, parse_overrides
from backend.settings import get_settings
from services.model_service import ModelParams

DATA = Path(__file__).resolve().parent.parent / "data"
REFERENCE = DATA / "reference.ini"
SMALL_R0 = [
    "--set", "regime.kind=R0",
    "--set", "solver.nx=100",
    "--set", "solver.nt=200",
    "--set", "sim.n_paths=120",
    "--set", "sim.n_steps=200",
    "--set", "sim.dump_path_indices=0",
]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("MINPRICE_OUTPUT_DIR", "MINPRICE_REGISTRY_ENABLED", "MINPRICE_N_JOBS", "MINPRICE_DATABASE_URL"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


# --------------------------------------------------------------------------- config


def test_reference_config_loads():
    config = load_config(REFERENCE)
    assert config.regime_spec().ell == -1.4
    assert config.regime.n_switches is None
    assert config.sim.dump_path_indices == (0, 1, 2)
    assert config.solver.trunc_schedule == (1e2, 1e3, 1e4, 1e5, 1e6)
    assert config.sv_params() is None


def test_overrides_take_precedence():
    config = load_config(REFERENCE, ["regime.kind=r4", "regime.delta=0.1", "regime.b=0.2", "regime.n_switches=3"])
    spec = config.regime_spec()
    assert spec.kind.value == "R4"
    assert (spec.delta, spec.b, spec.n_switches) == (0.1, 0.2, 3)
    assert spec.reentry == "optional"
    assert load_config(REFERENCE, ["regime.reentry=forced"]).regime_spec().reentry == "forced"


def test_sv_section_enables_the_two_dimensional_engine():
    config = load_config(None, ["sv.rho=-0.3"])
    assert config.sv_params().rho == -0.3


@pytest.mark.parametrize(
    "overrides",
    [["model.eta=-1"], ["regime.kind=R7"], ["solver.trunc_schedule=1e3,1e2"], ["model.unknown=1"], ["regime.reentry=sometimes"]],
)
def test_invalid_values_raise_config_error(overrides):
    with pytest.raises(ConfigError):
        load_config(REFERENCE, overrides)


def test_malformed_override():
    with pytest.raises(ConfigError):
        parse_overrides(["model.k"])
    with pytest.raises(ConfigError):
        parse_overrides(["market.k=1"])


def test_solve_hash_ignores_price_scale():
    base = config_from_mapping({"model": {"k": 1e-7, "eta": 0.3, "sigma": 0.6, "S0": 45.0}})
    scaled = config_from_mapping({"model": {"k": 2e-7, "eta": 0.6, "sigma": 1.2, "S0": 90.0}})
    assert base.solve_hash() == scaled.solve_hash()
    assert base.config_hash() != scaled.config_hash()
    moved = config_from_mapping({"regime": {"ell": -1.0}})
    assert moved.solve_hash() != base.solve_hash()


# --------------------------------------------------------------------------- commands


def test_check_exit_codes(tmp_path, capsys):
    assert main(["check", "-c", str(REFERENCE), "-o", str(tmp_path)]) == EXIT_OK
    assert "K_c" in capsys.readouterr().out
    assert main(["check", "-c", str(DATA / "assumption_fail.ini"), "-o", str(tmp_path)]) == EXIT_ASSUMPTION
    assert main(["check", "-c", str(DATA / "assumption_fail.ini"), "--set", "model.k=0", "-o", str(tmp_path)]) == EXIT_OK


def test_missing_config_is_an_io_error(tmp_path):
    assert main(["check", "-c", str(tmp_path / "nope.ini")]) == EXIT_IO


def test_violated_assumption_blocks_solve(tmp_path):
    assert main(["solve", "-c", str(DATA / "assumption_fail.ini"), "-o", str(tmp_path)]) == EXIT_ASSUMPTION
    assert not (tmp_path / "manifest.json").exists()


def test_solve_simulate_analyze(tmp_path):
    out = tmp_path / "run"
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R0, "-o", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["regime"]["kind"] == "R0"
    assert (out / manifest["grids"]["u"]["csv"]).exists()
    assert manifest["certificates"]["u"]["converged"]

    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R0, "-o", str(out)]) == EXIT_OK
    records = pd.read_csv(out / "records.csv")
    assert len(records) == 120
    assert records["liquidated"].all()
    assert (out / "trajectories" / "trajectory_000000.csv").exists()

    again = tmp_path / "again"
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R0, "--grids", str(out), "-o", str(again)]) == EXIT_OK
    assert (again / "records.csv").read_bytes() == (out / "records.csv").read_bytes()

    analysis = tmp_path / "analysis"
    assert main(["analyze", "-r", str(out / "records.csv"), "-b", str(again / "records.csv"), "-o", str(analysis)]) == EXIT_OK
    summary = json.loads((analysis / "summary.json").read_text())
    assert summary["p_liquidated"] == 1.0
    assert summary["mean_fq_pos"] is None
    assert (analysis / "tables" / "qq_A2.csv").exists()
    assert (analysis / "tables" / "baseline_comparison.csv").exists()

    moved = ["--set", "regime.ell=-1.0"]
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R0, *moved, "--grids", str(out), "-o", str(tmp_path / "x")]) == EXIT_IO


SMALL_R1 = [
    "--set", "regime.kind=R1",
    "--set", "solver.nx=100",
    "--set", "solver.nt=200",
    "--set", "sim.n_paths=60",
    "--set", "sim.n_steps=200",
    "--set", "sim.dump_path_indices=",
]


def _model_overrides(params: ModelParams) -> list:
    out = []
    for name in ("k", "eta", "sigma", "S0"):
        out += ["--set", f"model.{name}={getattr(params, name)!r}"]
    return out


@pytest.mark.parametrize("c", [2.0, 3.0])
def test_price_scale_leaves_the_pipeline_unchanged(tmp_path, c):
    base, scaled = tmp_path / "base", tmp_path / "scaled"
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R1, "-o", str(base)]) == EXIT_OK
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R1, "-o", str(base)]) == EXIT_OK
    overrides = _model_overrides(ModelParams().scaled(c))
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R1, *overrides, "-o", str(scaled)]) == EXIT_OK
    assert (scaled / "grids" / "u.csv").read_bytes() == (base / "grids" / "u.csv").read_bytes()
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R1, *overrides, "-o", str(scaled)]) == EXIT_OK

    ref = pd.read_csv(base / "records.csv")
    got = pd.read_csv(scaled / "records.csv")
    for col in ("fqT", "A1", "A2", "A3", "liquidated"):
        assert np.array_equal(got[col].to_numpy(), ref[col].to_numpy()), col
    np.testing.assert_allclose(got["A"], ref["A"], rtol=1e-10)
    np.testing.assert_allclose(got["XT"], c * ref["XT"], rtol=1e-9)

    shared = tmp_path / "shared"
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R1, *overrides, "--grids", str(base), "-o", str(shared)]) == EXIT_OK
    assert (shared / "records.csv").read_bytes() == (scaled / "records.csv").read_bytes()


def test_npz_grids_are_accepted(tmp_path):
    out = tmp_path / "npz"
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R0, "--format", "npz", "-o", str(out)]) == EXIT_OK
    assert (out / "grids" / "u.npz").exists()
    assert main(["simulate", "-c", str(REFERENCE), *SMALL_R0, "-o", str(out)]) == EXIT_OK


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MINPRICE_OUTPUT_DIR", str(tmp_path / "env"))
    get_settings.cache_clear()
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R0]) == EXIT_OK
    assert (tmp_path / "env" / "manifest.json").exists()


def test_runs_lists_the_registry(tmp_path, monkeypatch, capsys):
    assert main(["runs", "-o", str(tmp_path)]) == EXIT_IO
    monkeypatch.setenv("MINPRICE_REGISTRY_ENABLED", "true")
    get_settings.cache_clear()
    assert main(["solve", "-c", str(REFERENCE), *SMALL_R0, "-o", str(tmp_path)]) == EXIT_OK
    assert main(["check", "-c", str(REFERENCE), "-o", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()

    assert main(["runs", "-o", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    assert "solve" in lines[0]

    assert main(["runs", "-o", str(tmp_path), "--id", "1"]) == EXIT_OK
    row = json.loads(capsys.readouterr().out)
    assert row["command"] == "solve"
    assert row["response_payload"]["manifest"]["regime"]["kind"] == "R0"

    assert main(["runs", "-o", str(tmp_path), "--health"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["tables"]["runs"] == 1
    assert main(["runs", "-o", str(tmp_path), "--id", "99"]) == EXIT_IO


@pytest.mark.slow
def test_sweep_over_threshold(tmp_path):
    small = ["--set", "solver.nx=120", "--set", "solver.nt=160", "--set", "sim.n_paths=400", "--set", "sim.n_steps=200",
             "--set", "sim.dump_path_indices="]
    assert main(["sweep", "-c", str(REFERENCE), *small, "--axis", "ell", "--values", "-2.0,-1.0", "-o", str(tmp_path)]) == EXIT_OK
    table = pd.read_csv(tmp_path / "sweep.csv")
    assert list(table["ell"]) == [-2.0, -1.0]
    assert table["p_liquidated"].iloc[0] > table["p_liquidated"].iloc[1]
    assert (tmp_path / "sweep_cdf_A2.csv").exists()
