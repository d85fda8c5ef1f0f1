# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

from io import StringIO

import numpy as np
import pytest

from d2pc.lib.conic import ConicProblem, block, kron
from d2pc.lib.validation import ModelValidationError, SolverError


def test_psd_and_soc_problem():
    prob = ConicProblem("toy")
    X = prob.variable("X", (2, 2), symmetric=True)
    t = prob.variable("t")
    prob.add_psd(X - np.diag([1.0, 2.0]))
    prob.add_soc(np.array([3.0, 4.0]), t)
    prob.minimize(t + X[0, 0] + X[1, 1])
    report = prob.solve().require("toy")
    assert report.ok
    assert report.objective == pytest.approx(8.0, abs=1e-5)
    assert np.allclose(report["X"], np.diag([1.0, 2.0]), atol=1e-5)
    assert report.wall_time >= 0.0 and report.solver is not None


def test_parameters_are_reused():
    prob = ConicProblem("shift")
    x = prob.variable("x")
    c = prob.parameter("c", value=np.array(1.0))
    prob.add(x >= c)
    prob.minimize(x)
    assert prob.solve()["x"] == pytest.approx(1.0, abs=1e-6)
    prob.set_parameter("c", np.array(2.5))
    assert prob.solve()["x"] == pytest.approx(2.5, abs=1e-6)


def test_infeasible_status():
    prob = ConicProblem("empty")
    x = prob.variable("x")
    prob.add(x >= 1.0)
    prob.add(x <= 0.0)
    prob.minimize(x)
    report = prob.solve()
    assert report.status == "infeasible" and not report.ok
    with pytest.raises(SolverError) as excinfo:
        report.require("empty set")
    assert str(excinfo.value) == "empty set: solver status 'infeasible'"
    assert excinfo.value.status == "infeasible"


def test_duplicate_names():
    prob = ConicProblem("dup")
    prob.variable("x")
    with pytest.raises(ModelValidationError) as excinfo:
        prob.parameter("x")
    assert str(excinfo.value) == "'x' is already declared in conic problem 'dup'"


def test_unknown_parameter():
    prob = ConicProblem("p")
    with pytest.raises(ModelValidationError) as excinfo:
        prob.set_parameter("c", 1.0)
    assert str(excinfo.value) == "conic problem 'p' has no parameter 'c'"


def test_kron_of_expression():
    prob = ConicProblem("k")
    L = prob.variable("L", (2, 2), symmetric=True)
    expr = kron(L, np.eye(3))
    assert expr.shape == (6, 6)
    assert kron(np.eye(2), np.ones((1, 2))).shape == (2, 4)


def test_block_sizes_must_fit():
    prob = ConicProblem("b")
    X = prob.variable("X", (2, 2), symmetric=True)
    assert block([[X, np.zeros((2, 4))]]).shape == (2, 6)
    with pytest.raises(ModelValidationError) as excinfo:
        block([[np.eye(3), np.zeros((3, 1))], [np.zeros((1, 3)), X]])
    assert str(excinfo.value).startswith("blocks do not fit together: ")


def test_dump_lists_cones():
    prob = ConicProblem("dumped")
    X = prob.variable("X", (2, 2), symmetric=True)
    t = prob.variable("t")
    prob.add_psd(X - np.eye(2))
    prob.add_soc(X[0, :], t)
    prob.minimize(t)
    with StringIO() as out:
        prob.dump(out)
        lines = out.getvalue().splitlines()
    assert lines[0] == "# dumped: rows are b - A x in the listed cones"
    assert "VER" in lines and "ACOORD" in lines
    assert any(line.startswith("SVEC ") for line in lines)
    assert any(line.startswith("Q ") for line in lines)
