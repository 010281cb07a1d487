import json

import numpy as np
import pandas as pd
import pytest

import cli
from config import DATA_DIR
from services.config_service import (
    ModelBlock,
    apply_seed_override,
    build_model,
    build_solver_config,
    dump_normalized,
    load_config,
    model_to_config,
    normalized,
    parse_config,
)
from services.io_service import load_equilibrium, write_equilibrium
from services.solver_service import solve_mfg
from utils.errors import ArtifactError, ConfigError
from utils.generate_example_configs import EXAMPLES

TWO_STATE = {
    "model": {
        "states": 2,
        "horizon": 1.0,
        "n_steps": 40,
        "atlas": {"kind": "uniform", "n_cells": 3},
        "cost": {"kind": "quadratic", "potential": {"base": [0.0, 1.0]}},
        "F": {"kind": "local", "f": [[1.0, 0.0], [0.0, 1.0]]},
        "G": {"kind": "zero"},
        "m0": [0.5, 0.5],
    },
    "solver": {"tolerance": 1e-8},
    "monotonicity": {"n_samples": 200},
}


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return str(path)


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def _with(**blocks):
    payload = json.loads(json.dumps(TWO_STATE))
    for key, value in blocks.items():
        payload.setdefault(key, {}).update(value)
    return payload


def test_unknown_key_is_reported_with_its_line():
    text = '{\n  "model": {\n    "bogus": 1,\n    "m0": [0.5, 0.5]\n  }\n}\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text, "exp.json")
    assert "exp.json:3:" in str(info.value)
    assert "model.bogus" in str(info.value)


def test_invalid_json_names_the_position():
    with pytest.raises(ConfigError, match=r"exp\.json:1:"):
        parse_config("{ not json", "exp.json")


def test_normalized_document_reparses_to_itself():
    config = parse_config(json.dumps(TWO_STATE))
    doc = normalized(config)
    assert doc["solver"]["damping"] == 0.5
    assert doc["simulation"]["epsilon_grid"] == [0.001, 0.01, 0.1]
    assert normalized(parse_config(dump_normalized(config))) == doc


def test_seed_override_reaches_every_block():
    config = apply_seed_override(parse_config(json.dumps(TWO_STATE)), 7)
    assert config.solver.seed == 7
    assert config.simulation.seed == 7
    assert config.monotonicity.seed == 7
    assert config.graphon.seeds[:3] == [7, 8, 9]


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_shipped_configs_match_generator_and_build(name):
    path = DATA_DIR / f"{name}.json"
    assert json.loads(path.read_text(encoding="utf-8")) == EXAMPLES[name]()
    config = load_config(path)
    if config.model is not None:
        model = build_model(config.model)
        assert model.m0.shape == (model.atlas.size, model.d)


def test_model_block_round_trips():
    block = normalized(load_config(DATA_DIR / "quartic_cost.json"))["model"]
    model = build_model(ModelBlock.model_validate(block))
    saved = model_to_config(model)
    assert model_to_config(build_model(ModelBlock.model_validate(saved))) == saved
    assert model.states.d == 2


def test_m0_shape_is_checked():
    payload = _with()
    payload["model"]["m0"] = [0.2, 0.3, 0.5]
    with pytest.raises(ConfigError, match="m0"):
        build_model(parse_config(json.dumps(payload)).model)


def test_equilibrium_artifacts_round_trip(tmp_path):
    config = parse_config(json.dumps(TWO_STATE))
    model = build_model(config.model)
    result = solve_mfg(model, build_solver_config(config.solver))
    files = write_equilibrium(result, model, tmp_path)
    assert files == ["value.csv", "flow.csv", "policy.csv", "summary.json"]
    loaded = load_equilibrium(tmp_path, model)
    np.testing.assert_allclose(loaded.value.values, result.value.values, rtol=1e-12)
    np.testing.assert_allclose(loaded.flow.values, result.flow.values, rtol=1e-12)
    np.testing.assert_allclose(loaded.policy.rates, result.policy.rates, rtol=1e-12)
    assert loaded.converged == result.converged
    assert loaded.residual_history == result.residual_history


def test_excel_workbook_holds_the_three_tables_and_residuals(tmp_path):
    config = parse_config(json.dumps(TWO_STATE))
    model = build_model(config.model)
    result = solve_mfg(model, build_solver_config(config.solver))
    files = write_equilibrium(result, model, tmp_path, formats=["excel"])
    assert files[-1] == "equilibrium.xlsx"

    sheets = pd.read_excel(tmp_path / "equilibrium.xlsx", sheet_name=None)
    assert list(sheets) == ["Value", "Flow", "Policy", "Residuals"]
    for name in ("value.csv", "flow.csv", "policy.csv"):
        sheet = sheets[name.split(".")[0].capitalize()]
        pd.testing.assert_frame_equal(sheet, pd.read_csv(tmp_path / name), check_dtype=False)
    residuals = sheets["Residuals"]
    assert list(residuals.columns) == ["iteration", "residual"]
    assert len(residuals) == len(result.residual_history)
    np.testing.assert_allclose(residuals["residual"], result.residual_history)


def test_solve_lists_the_workbook_when_excel_is_requested(tmp_path, capsys):
    config = _write(tmp_path, _with(output={"formats": ["csv", "json", "excel"]}))
    assert cli.main(["solve", config, "--out", str(tmp_path / "out")]) == 0
    assert "equilibrium.xlsx" in json.loads(capsys.readouterr().out)["files"]
    assert (tmp_path / "out" / "equilibrium.xlsx").is_file()


def test_loading_from_an_empty_directory_names_the_summary(tmp_path):
    model = build_model(parse_config(json.dumps(TWO_STATE)).model)
    with pytest.raises(ArtifactError) as info:
        load_equilibrium(tmp_path, model)
    assert info.value.file_name == "summary.json"


def test_solve_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    config = _write(tmp_path, TWO_STATE)
    first, second = tmp_path / "a", tmp_path / "b"
    assert cli.main(["solve", config, "--out", str(first)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["converged"] is True
    assert set(report["files"]) == {"value.csv", "flow.csv", "policy.csv", "summary.json"}

    flow = pd.read_csv(first / "flow.csv")
    assert list(flow.columns) == ["time_index", "time", "cell", "position", "state", "mass"]
    assert flow["cell"].min() == 1 and flow["state"].max() == 2
    summary = json.loads((first / "summary.json").read_text(encoding="utf-8"))
    assert summary["converged"] is True
    assert "seconds" in summary["timing"]
    assert summary["config"]["model"]["n_steps"] == 40

    assert cli.main(["solve", config, "--out", str(second)]) == 0
    for name in ("value.csv", "flow.csv", "policy.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_malformed_config_exits_1_and_writes_nothing(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"model": {"states": 2,', encoding="utf-8")
    out = tmp_path / "out"
    assert cli.main(["solve", str(path), "--out", str(out)]) == 1
    assert "invalid JSON" in capsys.readouterr().err
    assert not out.exists()


def test_iteration_cap_exits_2(tmp_path, capsys):
    config = _write(tmp_path, _with(solver={"max_iterations": 1, "tolerance": 1e-12}))
    assert cli.main(["solve", config, "--out", str(tmp_path / "out")]) == 2
    assert json.loads(capsys.readouterr().out)["status"] == "not_converged"
    assert (tmp_path / "out" / "summary.json").is_file()


def test_check_monotone_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, TWO_STATE, "good.json")
    assert cli.main(["check-monotone", good, "--out", str(tmp_path / "good")]) == 0

    anti = _with()
    anti["model"]["F"]["f"] = [[-1.0, 0.0], [0.0, -1.0]]
    bad = _write(tmp_path, anti, "bad.json")
    assert cli.main(["check-monotone", bad, "--out", str(tmp_path / "bad")]) == 3
    report = json.loads((tmp_path / "bad" / "monotone.json").read_text(encoding="utf-8"))
    assert report["monotone"] is False
    assert report["F"]["min_value"] < 0
    assert report["G"]["min_value"] == 0.0

    zero = _with()
    zero["model"]["F"] = {"kind": "zero"}
    flat = _write(tmp_path, zero, "zero.json")
    capsys.readouterr()
    assert cli.main(["check-monotone", flat, "--out", str(tmp_path / "zero")]) == 0
    assert json.loads(capsys.readouterr().out)["min_value"] == 0.0


def test_missing_equilibrium_source_exits_1(tmp_path, capsys):
    config = _write(tmp_path, _with(simulation={"n_players": 4, "n_runs": 5, "equilibrium_from": str(tmp_path / "none")}))
    assert cli.main(["simulate", config, "--out", str(tmp_path / "out")]) == 1
    assert "summary.json" in capsys.readouterr().err


def test_simulate_from_saved_equilibrium(tmp_path, capsys):
    solved = tmp_path / "solved"
    config = _write(tmp_path, _with(simulation={"n_players": [3, 6], "n_runs": 20, "equilibrium_from": str(solved)}))
    assert cli.main(["solve", config, "--out", str(solved)]) == 0
    assert cli.main(["simulate", config, "--out", str(tmp_path / "sim")]) == 0
    report = json.loads((tmp_path / "sim" / "simulate.json").read_text(encoding="utf-8"))
    assert report["equilibrium"]["origin"] == "loaded"
    assert [run["n_players"] for run in report["runs"]] == [3, 6]
    costs = pd.read_csv(tmp_path / "sim" / "player_costs.csv")
    assert len(costs) == 9
    assert costs["player"].min() == 1


def test_nash_gap_sweep(tmp_path, capsys):
    config = _write(
        tmp_path,
        _with(simulation={"n_players": [4, 8], "n_runs": 1, "cost_estimator": "policy_evaluation"}),
    )
    assert cli.main(["nash-gap", config, "--out", str(tmp_path / "gap")]) == 0
    report = json.loads(capsys.readouterr().out, parse_constant=_reject_constant)
    assert [row["max_standard_error"] for row in report["sweep"]] == [None, None]
    sweep = pd.read_csv(tmp_path / "gap" / "sweep.csv")
    assert list(sweep["n_players"]) == [4, 8]
    assert (sweep["epsilon_hat"] >= 0).all()
    gaps = pd.read_csv(tmp_path / "gap" / "gaps.csv")
    assert len(gaps) == 12


def test_graphon_study(tmp_path, capsys):
    config = _write(
        tmp_path,
        {"graphon": {"kernel": {"name": "average"}, "sizes": [4, 16], "seeds": [0, 1], "restarts": 4, "exact_up_to": 4}},
    )
    assert cli.main(["graphon", config, "--out", str(tmp_path / "g")]) == 0
    frame = pd.read_csv(tmp_path / "g" / "cutnorm.csv")
    assert list(frame.columns) == ["n", "seed", "method", "value", "seconds"]
    assert set(frame["n"]) == {4, 16}
    assert json.loads(capsys.readouterr().out)["files"] == ["cutnorm.csv"]


def test_workflow_without_model_exits_1(tmp_path, capsys):
    config = _write(tmp_path, {"graphon": {"sizes": [4]}})
    assert cli.main(["solve", config, "--out", str(tmp_path / "out")]) == 1
    assert "model" in capsys.readouterr().err


def test_dump_normalized_prints_and_exits(tmp_path, capsys):
    config = _write(tmp_path, TWO_STATE)
    assert cli.main(["solve", config, "--dump-normalized", "--seed", "3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["solver"]["seed"] == 3
    assert doc["model"]["atlas"]["placement"] == "right"
    assert not (tmp_path / "outputs").exists()


def test_threads_must_be_positive(tmp_path):
    assert cli.main(["solve", _write(tmp_path, TWO_STATE), "--threads", "0"]) == 1
