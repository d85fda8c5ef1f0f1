# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import logging
from dataclasses import replace

import numpy as np
import pytest

from d2pc.lib.mpcdesign import ConstraintSpec, design_mpc
from d2pc.lib.mpconline import (
    MpcState,
    OnlineMpc,
    build_and_solve_ocp,
    check_candidate,
    initial_state,
    plan_cost,
    propagate_tube,
    shifted_candidate,
    tube_increment,
)
from d2pc.lib.validation import (
    InfeasibleStartError,
    ModelValidationError,
    OptionParseError,
)


@pytest.fixture(scope="module")
def first_plan(scalar_design):
    return OnlineMpc(scalar_design).solve(initial_state(scalar_design))


def test_initial_state(scalar_design):
    state = initial_state(scalar_design)
    assert state.t == 0 and state.alpha_next == 0.0 and state.plan is None
    assert np.allclose(state.xi_bar_next, [0.5, 0.0])
    assert np.allclose(state.x_c, [0.0])


def test_negative_scaling_rejected():
    with pytest.raises(ModelValidationError) as excinfo:
        MpcState(x_c=np.zeros(1), alpha_next=-0.1, xi_bar_next=np.zeros(2))
    assert str(excinfo.value) == "carried tube scaling -0.1 must be non-negative"


def test_unknown_mode(scalar_design):
    with pytest.raises(OptionParseError) as excinfo:
        OnlineMpc(scalar_design, mode="qp")
    assert str(excinfo.value) == "mode 'qp' must be one of the following: soc, lmi"


def test_first_plan_is_feasible(scalar_design, first_plan):
    assert first_plan is not None
    assert first_plan.horizon == scalar_design.horizon
    assert first_plan.alpha[0] == 0.0
    assert np.allclose(first_plan.xi_bar[0], scalar_design.mu_xi0)
    assert check_candidate(scalar_design, first_plan, 0, tol=1e-5) == []
    assert first_plan.objective == pytest.approx(
        plan_cost(scalar_design, first_plan.xi_bar, first_plan.nu)
    )


def test_shifted_plan_stays_feasible(scalar_design, first_plan):
    candidate = shifted_candidate(scalar_design, first_plan)
    assert candidate.status == "candidate"
    assert np.allclose(candidate.nu[-1], 0.0)
    assert np.allclose(candidate.xi_bar[0], first_plan.xi_bar[1])
    assert check_candidate(scalar_design, candidate, 1, tol=1e-5) == []


def test_candidate_check_reports_violations(scalar_design, first_plan):
    broken = replace(first_plan, xi_bar=first_plan.xi_bar + 1.0)
    assert "nominal dynamics" in check_candidate(scalar_design, broken, 0)


def test_singular_value_bound_is_tighter(scalar_design, rng):
    for _ in range(10):
        xi = rng.standard_normal(scalar_design.n_xi)
        nu = rng.standard_normal(scalar_design.n_u)
        soc = tube_increment(scalar_design, xi, nu, "soc")
        lmi = tube_increment(scalar_design, xi, nu, "lmi")
        assert 0.0 <= lmi <= soc + 1e-10


def test_propagate_tube_recursion(scalar_design, first_plan):
    xi, alpha = propagate_tube(
        scalar_design, scalar_design.mu_xi0, 0.2, first_plan.nu
    )
    assert alpha[0] == 0.2
    for i in range(first_plan.horizon):
        growth = tube_increment(scalar_design, xi[i], first_plan.nu[i])
        assert alpha[i + 1] == pytest.approx(scalar_design.rho * alpha[i] + growth)


def test_lmi_mode_plan(scalar_design):
    plan = build_and_solve_ocp(scalar_design, initial_state(scalar_design), "lmi")
    assert plan is not None
    assert check_candidate(scalar_design, plan, 0, mode="lmi", tol=1e-5) == []


def test_step_advances_state(scalar_design, first_plan):
    mpc = OnlineMpc(scalar_design, check_candidates=True)
    state = initial_state(scalar_design)
    u, plan, nxt = mpc.step(state, np.array([0.5]))
    assert nxt.t == 1 and nxt.plan is plan
    assert nxt.alpha_next == pytest.approx(plan.alpha[1])
    assert np.allclose(u, plan.nu[0])
    assert np.allclose(nxt.x_c, scalar_design.L @ np.array([0.5]))
    u, plan, nxt = mpc.step(nxt, np.array([0.4]))
    assert nxt.t == 2 and mpc.infeasible_solves == 0
    assert mpc.candidate_failures == 0


def test_infeasible_first_step(scalar_design):
    state = MpcState(
        x_c=np.zeros(1), alpha_next=0.0, xi_bar_next=np.array([100.0, 0.0])
    )
    mpc = OnlineMpc(scalar_design)
    with pytest.raises(InfeasibleStartError) as excinfo:
        mpc.step(state, np.zeros(1))
    assert (
        str(excinfo.value)
        == "predictive control problem infeasible at the first step"
    )
    assert mpc.infeasible_solves == 1


def test_fallback_to_candidate(scalar_design, caplog):
    caplog.set_level(logging.WARNING)
    mpc = OnlineMpc(scalar_design)
    _, plan, nxt = mpc.step(initial_state(scalar_design), np.array([0.5]))
    stuck = replace(nxt, alpha_next=100.0)
    _, fallback, after = mpc.step(stuck, np.array([0.5]))
    assert fallback.status == "fallback" and mpc.infeasible_solves == 1
    assert np.allclose(fallback.nu[:-1], plan.nu[1:])
    assert after.t == 2
    assert any(
        "recursive feasibility violated" in r.getMessage() for r in caplog.records
    )


@pytest.fixture(scope="module")
def slack_design(
    scalar_open_lfr, scalar_lqg, scalar_ellipsoid, scalar_truth, scalar_perf
):
    constraints = ConstraintSpec.from_bounds(
        1, 1, 0.9, state_bounds=[(0, 100.0)], input_bounds=[(0, 100.0)]
    )
    return design_mpc(
        scalar_open_lfr,
        scalar_lqg,
        scalar_ellipsoid,
        scalar_truth.Q,
        scalar_truth.R,
        scalar_perf,
        constraints,
        mu_x0=np.zeros(1),
        Sigma_x0=1e-6 * np.eye(1),
        N=3,
        horizon=5,
        threads=1,
    )


def test_slack_constraints_leave_linear_controller(slack_design):
    mpc = OnlineMpc(slack_design)
    state = initial_state(slack_design)
    for y in (0.3, -0.2, 0.1, 0.4):
        x_c = state.x_c
        u, plan, state = mpc.step(state, np.array([y]))
        assert np.allclose(plan.nu, 0.0, atol=1e-5)
        assert np.allclose(u, slack_design.K @ x_c, atol=1e-5)
    assert mpc.infeasible_solves == 0


def test_objective_decreases_by_stage_cost(scalar_design):
    d = scalar_design
    mpc = OnlineMpc(d)
    _, plan, state = mpc.step(initial_state(d), np.array([0.5]))
    for y in (0.4, 0.3, 0.2):
        xi0, nu0 = plan.xi_bar[0], plan.nu[0]
        stage = xi0 @ d.Q_xi_c @ xi0 + nu0 @ d.R_c @ nu0
        candidate = shifted_candidate(d, plan)
        assert candidate.objective == pytest.approx(
            plan.objective - stage, rel=1e-6, abs=1e-9
        )
        _, plan, state = mpc.step(state, np.array([y]))
        assert plan.objective <= candidate.objective + 1e-6
