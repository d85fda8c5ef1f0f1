# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import json

import numpy as np
import pytest

from d2pc.lib.artifacts import (
    PipelineConfig,
    decode_config,
    dump_config,
    dump_design,
    dump_model,
    dump_theta,
    load_config,
    load_design,
    load_model,
    load_theta,
    open_output,
    read_document,
    read_iodata,
    write_iodata,
    write_monte_carlo_runs,
    write_run_log,
)
from d2pc.lib.model import assemble_dynamics
from d2pc.lib.mpconline import OnlineMpc, initial_state
from d2pc.lib.sim import MonteCarloSummary, RolloutMetrics, StepRecord
from d2pc.lib.validation import ModelValidationError


def test_model_survives_disk(tmp_path, msd2):
    _, model = msd2
    path = str(tmp_path / "model.json")
    dump_model(model, path)
    loaded = load_model(path)
    v = np.linspace(-1.0, 1.0, model.n_theta)
    for a, b in zip(assemble_dynamics(model, v), assemble_dynamics(loaded, v)):
        assert np.array_equal(a, b)
    assert loaded.name == "msd2" and loaded.n_eta == model.n_eta


def test_theta_is_rebuilt_from_vectors(tmp_path, scalar_model, scalar_theta):
    path = str(tmp_path / "theta.json")
    dump_theta(scalar_theta, path)
    loaded = load_theta(path, scalar_model)
    assert np.array_equal(loaded.vartheta, scalar_theta.vartheta)
    assert np.allclose(loaded.Q, scalar_theta.Q)


def test_documents_differ_only_in_metadata(tmp_path, scalar_theta):
    paths = [str(tmp_path / f"theta{i}.json") for i in range(2)]
    for path in paths:
        dump_theta(scalar_theta, path)
    docs = []
    for path in paths:
        with open(path) as f:
            docs.append(json.load(f))
    assert docs[0]["data"] == docs[1]["data"]
    assert docs[0]["kind"] == "theta" and docs[0]["version"] == 1
    assert set(docs[0]["metadata"]) == {"program", "version", "created"}


def test_loaded_design_plans_identically(tmp_path, scalar_design):
    path = str(tmp_path / "design.json")
    dump_design(scalar_design, path)
    loaded = load_design(path)
    assert loaded.N == scalar_design.N and loaded.horizon == scalar_design.horizon
    plans = [
        OnlineMpc(d).solve(initial_state(d)) for d in (scalar_design, loaded)
    ]
    assert np.allclose(plans[0].nu, plans[1].nu, atol=1e-6)


def test_wrong_kind(tmp_path, scalar_theta):
    path = str(tmp_path / "theta.json")
    dump_theta(scalar_theta, path)
    with pytest.raises(ModelValidationError) as excinfo:
        read_document(path, "model")
    assert str(excinfo.value) == f"'{path}' holds a 'theta' artifact, expected 'model'"


def test_missing_input(tmp_path):
    path = str(tmp_path / "nope.json")
    with pytest.raises(ModelValidationError) as excinfo:
        load_model(path)
    assert str(excinfo.value) == f"input file '{path}' does not exist"


def test_missing_entry(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"version": 1, "kind": "model", "data": {}}))
    with pytest.raises(ModelValidationError) as excinfo:
        load_model(str(path))
    assert str(excinfo.value) == f"{path}: artifact is missing 'theta_box'"


def test_failed_write_keeps_target(tmp_path):
    path = tmp_path / "keep.txt"
    path.write_text("old\n")
    with pytest.raises(RuntimeError):
        with open_output(str(path)) as f:
            f.write("new\n")
            raise RuntimeError("interrupted")
    assert path.read_text() == "old\n"


def test_iodata_csv(tmp_path, scalar_data):
    path = str(tmp_path / "data.csv")
    write_iodata(scalar_data, path)
    with open(path) as f:
        assert f.readline().strip() == "t,u_1,y_1"
    loaded = read_iodata(path)
    assert np.array_equal(loaded.Y, scalar_data.Y)
    assert np.array_equal(loaded.U, scalar_data.U)


def test_iodata_needs_columns(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("t,a,b\n0,1,2\n")
    with pytest.raises(ModelValidationError) as excinfo:
        read_iodata(str(path))
    assert str(excinfo.value) == f"'{path}' needs u_* and y_* columns, found t, a, b"


def test_monte_carlo_csv(tmp_path):
    runs = [
        RolloutMetrics(
            stage_costs=np.array([1.0, 3.0]),
            violations=np.array([[True, False], [True, False]]),
            solve_times=np.array([0.25, 0.25]),
        ),
        RolloutMetrics(
            stage_costs=np.array([]),
            violations=np.zeros((0, 2), dtype=bool),
            solve_times=np.array([]),
            aborted=True,
            error="stuck",
        ),
    ]
    summary = MonteCarloSummary(
        runs=2,
        aborted=1,
        mean_cost=2.0,
        cost_stderr=float("nan"),
        violation_rate=np.array([[1.0, 0.0], [1.0, 0.0]]),
        run_violation_rate=1.0,
        mean_solve_time=0.25,
        infeasible_solves=0,
        per_run=runs,
    )
    path = tmp_path / "runs.csv"
    write_monte_carlo_runs(summary, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == (
        "run,cost,steps,aborted,infeasible_solves,violated,"
        "violations_1,violations_2,mean_solve_time,error"
    )
    assert lines[1] == "0,2,2,0,0,1,2,0,0.25,"
    assert lines[2].startswith("1,") and lines[2].endswith(",stuck")


def test_run_log_has_input_corrections(tmp_path):
    record = StepRecord(
        t=0,
        u=np.array([1.5, -0.5]),
        nu=np.array([0.25, 0.0]),
        y=np.array([2.0]),
        alpha=0.0,
        objective=4.0,
        status="optimal",
        solve_time=0.125,
    )
    path = tmp_path / "run_log.csv"
    write_run_log([record], str(path))
    assert path.read_text().splitlines() == [
        "t,u_1,u_2,nu_1,nu_2,y_1,alpha,objective,status,solve_time",
        "0,1.5,-0.5,0.25,0,2,0,4,optimal,0.125",
    ]


def test_config_defaults_and_overrides():
    config = decode_config(
        {
            "delta": "0.9",
            "gem": {"max_iters": 5},
            "constraints": {"H": [[1.0, 0.0]], "p": [0.8]},
        }
    )
    assert config.delta == 0.9 and config.gem.max_iters == 5
    assert config.constraints.r == 1 and config.mode == "soc"
    mean, cov = config.initial_moments(2)
    assert np.allclose(mean, 0.0) and np.allclose(cov, 1e-6 * np.eye(2))


def test_config_rejects_unknown_keys():
    with pytest.raises(ModelValidationError) as excinfo:
        decode_config({"horizon": 5, "speed": 1, "color": "red"})
    assert str(excinfo.value) == "unknown configuration keys: color, speed"


def test_config_rejects_bad_multiplier():
    with pytest.raises(ModelValidationError) as excinfo:
        PipelineConfig(multiplier="diagonal")
    assert (
        str(excinfo.value)
        == "multiplier 'diagonal' must be one of the following: full, scalar, none"
    )


def test_config_file_forms(tmp_path):
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps({"runs": 7, "x0_mean": [0.1, 0.2]}))
    config = load_config(str(bare))
    assert config.runs == 7 and np.allclose(config.x0_mean, [0.1, 0.2])
    wrapped = str(tmp_path / "wrapped.json")
    dump_config(config, wrapped)
    again = load_config(wrapped)
    assert again.runs == 7 and np.allclose(again.x0_mean, [0.1, 0.2])


def test_default_performance(scalar_model):
    perf = PipelineConfig(input_weight=0.1).performance(scalar_model)
    assert np.allclose(perf.Q_c, scalar_model.C.T @ scalar_model.C)
    assert np.allclose(perf.R_c, 0.01)
