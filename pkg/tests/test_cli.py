# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import json
import os
from contextlib import redirect_stdout
from dataclasses import replace
from io import StringIO
from os import EX_OK, EX_USAGE

import numpy as np
import pytest

from d2pc.cli import main
from d2pc.lib.artifacts import (
    dump_ellipsoid,
    dump_model,
    dump_scenario,
    dump_theta,
    encode_constraints,
    load_design,
    load_ellipsoid,
    load_theta,
    write_iodata,
)
from d2pc.lib.sim import Scenario


@pytest.fixture
def scalar_workdir(tmp_path, scalar_model, scalar_data):
    dump_model(scalar_model, str(tmp_path / "model.json"))
    write_iodata(scalar_data, str(tmp_path / "data.csv"))
    return tmp_path


def test_missing_input(caplog_cli_error, tmp_path):
    missing = str(tmp_path / "nope.json")
    exit_code = main(["identify", "--model", missing, "--out", str(tmp_path)])

    assert (
        exit_code == 1
        and caplog_cli_error.records[0].getMessage()
        == f"input file '{missing}' does not exist"
    )


def test_json_errors(caplog_cli_error, tmp_path):
    missing = str(tmp_path / "nope.json")
    with redirect_stdout(StringIO()) as out:
        exit_code = main(
            ["identify", "--model", missing, "--out", str(tmp_path), "--json-errors"]
        )

    assert exit_code == 1
    assert json.loads(out.getvalue()) == {
        "error": {
            "kind": "ModelValidationError",
            "message": f"input file '{missing}' does not exist",
            "exit_code": 1,
        }
    }


def test_bad_probability(caplog_cli_error, tmp_path):
    exit_code = main(["uq", "--delta", "2", "--out", str(tmp_path)])

    assert (
        exit_code == EX_USAGE
        and caplog_cli_error.records[0].getMessage()
        == "probability '2' must be in (0, 1)"
    )


def test_bad_mode(caplog_cli_error, tmp_path):
    exit_code = main(["run", "--mode", "qp", "--out", str(tmp_path)])

    assert (
        exit_code == EX_USAGE
        and caplog_cli_error.records[0].getMessage()
        == "mode 'qp' must be one of the following: soc, lmi"
    )


def test_design_needs_constraints(caplog_cli_error, tmp_path):
    exit_code = main(["design", "--out", str(tmp_path)])

    assert (
        exit_code == 1
        and caplog_cli_error.records[0].getMessage()
        == "no constraints configured; set 'constraints' in the configuration file"
    )


def test_unknown_config_keys(caplog_cli_error, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"speed": 3}))
    exit_code = main(["uq", "--config", str(config), "--out", str(tmp_path)])

    assert (
        exit_code == 1
        and caplog_cli_error.records[0].getMessage()
        == f"{config}: unknown configuration keys: speed"
    )


def test_version():
    with redirect_stdout(StringIO()):
        assert main(["--version"]) == EX_OK


def test_identify_then_uq(scalar_workdir, scalar_model):
    out = str(scalar_workdir)
    assert main(["identify", "--max-iters", "100", "--out", out, "-q"]) == EX_OK
    assert os.path.exists(os.path.join(out, "gem_trace.csv"))
    theta = load_theta(os.path.join(out, "theta.json"), scalar_model)
    assert theta.vartheta.shape == (scalar_model.n_theta,)

    assert main(["uq", "--delta", "0.8", "--out", out, "-q"]) == EX_OK
    ellipsoid = load_ellipsoid(os.path.join(out, "ellipsoid.json"))
    assert ellipsoid.delta == 0.8
    assert ellipsoid.vartheta_hat == pytest.approx(theta.vartheta)


@pytest.fixture
def scalar_stagedir(
    scalar_workdir,
    scalar_theta,
    scalar_ellipsoid,
    scalar_truth,
    scalar_constraints,
    scalar_perf,
):
    dump_theta(scalar_theta, str(scalar_workdir / "theta.json"))
    dump_ellipsoid(scalar_ellipsoid, str(scalar_workdir / "ellipsoid.json"))
    scenario = Scenario(
        replace(scalar_truth, x0_mean=np.array([0.5])),
        scalar_constraints,
        scalar_perf,
        runs=3,
        steps=4,
    )
    dump_scenario(scenario, str(scalar_workdir / "scenario.json"))
    config = {
        "constraints": encode_constraints(scalar_constraints),
        "x0_mean": [0.5],
        "input_weight": 0.1,
        "N": 3,
        "horizon": 5,
    }
    (scalar_workdir / "config.json").write_text(json.dumps(config))
    return scalar_workdir


def test_design_and_evaluation_stages(scalar_stagedir):
    out = str(scalar_stagedir)
    common = ["--config", os.path.join(out, "config.json"), "--out", out, "-q"]
    assert main(["synth", "--verify-samples", "20", *common]) == EX_OK
    assert main(["design", *common]) == EX_OK
    assert main(["design", "--nominal", *common]) == EX_OK
    assert load_design(os.path.join(out, "design_nominal.json")).nominal

    assert main(["run", *common]) == EX_OK
    with open(os.path.join(out, "run_log.csv")) as f:
        lines = f.read().splitlines()
    assert lines[0] == "t,u_1,nu_1,y_1,alpha,objective,status,solve_time"
    assert len(lines) == 5

    with redirect_stdout(StringIO()) as table:
        for policy in ("mpc", "nominal", "robust"):
            assert main(["eval", "--policy", policy, *common]) == EX_OK
    assert "Evaluation of policy 'robust'" in table.getvalue()
    for policy in ("mpc", "nominal", "robust"):
        with open(os.path.join(out, f"metrics_{policy}.json")) as f:
            metrics = json.load(f)["data"]
        assert metrics["policy"] == policy and metrics["runs"] == 3
        assert os.path.exists(os.path.join(out, f"runs_{policy}.csv"))


def test_nominal_policy_needs_nominal_design(caplog_cli_error, scalar_stagedir):
    out = str(scalar_stagedir)
    common = ["--config", os.path.join(out, "config.json"), "--out", out, "-q"]
    assert main(["synth", "--verify-samples", "0", *common]) == EX_OK
    assert main(["design", *common]) == EX_OK
    design = os.path.join(out, "design.json")
    exit_code = main(["eval", "--policy", "nominal", "--design", design, *common])

    assert (
        exit_code == 1
        and caplog_cli_error.records[0].getMessage()
        == "policy 'nominal' needs a design made with --nominal"
    )


def test_demo_on_two_masses(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps({"N": 3, "horizon": 8, "rho_grid": [0.97, 0.98, 0.99]})
    )
    argv = [
        "demo-msd",
        "--masses",
        "2",
        "--runs",
        "40",
        "--steps",
        "30",
        "--skip-lmi",
        "--config",
        str(config),
        "--out",
        str(tmp_path),
        "-q",
    ]
    with redirect_stdout(StringIO()) as table:
        assert main(argv) == EX_OK

    for name in (
        "model.json",
        "data.csv",
        "scenario.json",
        "theta.json",
        "gem_trace.csv",
        "ellipsoid.json",
        "controller.json",
        "design.json",
        "design_nominal.json",
        "summary.txt",
    ):
        assert (tmp_path / name).exists(), name
    assert not (tmp_path / "metrics_d2pc_lmi.json").exists()
    metrics = {}
    for tag in ("robust", "d2pc_soc", "nominalsmpc"):
        assert (tmp_path / f"runs_{tag}.csv").exists()
        document = json.loads((tmp_path / f"metrics_{tag}.json").read_text())
        metrics[tag] = document["data"]
        assert metrics[tag]["runs"] == 40 and metrics[tag]["aborted"] == 0
    assert metrics["d2pc_soc"]["max_violation"] <= 0.05
    assert metrics["robust"]["run_violation_rate"] >= 0.5
    assert "d2pc (soc)" in table.getvalue()
    assert (tmp_path / "summary.txt").read_text() == table.getvalue()
