# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest
from scipy import linalg as la
from scipy.stats import norm

from d2pc.lib.common import blkdiag, spectral_radius
from d2pc.lib.lfr import build_open_lfr, uncertain_closed_loop
from d2pc.lib.mpcdesign import (
    ConstraintSpec,
    default_rho_grid,
    design_error_covariance,
    design_mpc,
    design_terminal,
    design_tube,
    tightening_terms,
    uncertainty_factor,
)
from d2pc.lib.mpconline import (
    OnlineMpc,
    build_and_solve_ocp,
    check_candidate,
    initial_state,
)
from d2pc.lib.sim import msd_performance, msd_scenario, theta_from_truth
from d2pc.lib.synth import closed_loop_of, nominal_lqg
from d2pc.lib.uq import confidence_ellipsoid
from d2pc.lib.validation import ModelValidationError, SolverError


@pytest.fixture(scope="module")
def scalar_clfr(scalar_open_lfr, scalar_lqg, scalar_truth, scalar_perf):
    return closed_loop_of(
        scalar_lqg, scalar_open_lfr, scalar_truth.Q, scalar_truth.R, scalar_perf
    )


def test_constraints_from_bounds():
    spec = ConstraintSpec.from_bounds(2, 1, 0.95, [(1, 0.5)], [(0, 4.0)])
    assert spec.r == 4
    assert np.allclose(spec.H[0], [0.0, 2.0, 0.0])
    assert np.allclose(spec.H[1], [0.0, -2.0, 0.0])
    assert np.allclose(spec.H[2], [0.0, 0.0, 0.25])
    assert np.allclose(spec.p, 0.95)


def test_constraints_need_levels_in_range():
    with pytest.raises(ModelValidationError) as excinfo:
        ConstraintSpec(np.eye(2), np.array([0.9, 1.0]))
    assert str(excinfo.value) == "constraint probability levels must lie in (0, 1)"


def test_constraints_need_a_bound():
    with pytest.raises(ModelValidationError) as excinfo:
        ConstraintSpec.from_bounds(2, 1, 0.9)
    assert str(excinfo.value) == "at least one bound is required"


def test_tightening_by_hand():
    constraints = ConstraintSpec(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.9, 0.5]))
    Sigma = np.diag([0.04, 0.01])
    c, f = tightening_terms([Sigma], np.diag([4.0, 1.0]), np.eye(2), constraints)
    assert c[0, 0] == pytest.approx(norm.ppf(0.9) * 0.2)
    assert c[1, 0] == pytest.approx(0.0)
    assert np.allclose(f, [0.5, 2.0])


def test_tightening_below_half_is_negative():
    constraints = ConstraintSpec(np.eye(1), np.array([0.3]))
    c, _ = tightening_terms([np.eye(1) * 0.01], np.eye(1), np.eye(1), constraints)
    assert c[0, 0] < 0.0


def test_unsatisfiable_constraint():
    constraints = ConstraintSpec(np.eye(1), np.array([0.9]))
    with pytest.raises(ModelValidationError) as excinfo:
        tightening_terms([np.eye(1)], np.eye(1), np.eye(1), constraints)
    assert str(excinfo.value) == "constraint 0 unsatisfiable at level 0.9"


def test_terminal_set_empty():
    with pytest.raises(ModelValidationError) as excinfo:
        design_terminal(
            np.eye(1),
            np.array([[1.0]]),
            np.array([1.0]),
            np.zeros((1, 1)),
            np.eye(1),
            0.5 * np.eye(1),
            np.eye(1),
        )
    assert str(excinfo.value) == "terminal set empty"


def test_terminal_weight_solves_lyapunov():
    A = np.array([[0.5, 0.1], [0.0, 0.3]])
    Q = np.eye(2)
    terminal = design_terminal(
        np.eye(2),
        np.array([[0.2], [0.4]]),
        np.array([1.0, 2.0]),
        np.zeros((2, 2)),
        np.eye(2),
        A,
        Q,
    )
    assert terminal.c_lower == pytest.approx(0.3)
    assert terminal.sigma_bar == pytest.approx(0.0)
    assert np.allclose(A.T @ terminal.S_xi_c @ A + Q, terminal.S_xi_c)


def test_nominal_tube(scalar_clfr, scalar_open_lfr, scalar_constraints):
    F0 = uncertainty_factor(scalar_open_lfr, None)
    assert not np.any(F0)
    tube = design_tube(scalar_clfr, None, F0, scalar_constraints, threads=1)
    A = scalar_clfr.A_cal_hat
    assert np.trace(tube.X_P) == pytest.approx(2.0, rel=1e-4)
    gap = tube.rho ** 2 * tube.X_P - A @ tube.X_P @ A.T
    assert la.eigvalsh(gap).min() >= -1e-6
    assert tube.rho in default_rho_grid(A)


def test_default_rho_grid():
    grid = default_rho_grid(np.diag([0.5, -0.2]))
    assert grid.size == 12
    assert grid[0] == pytest.approx(0.51) and grid[-1] == pytest.approx(0.999)
    assert np.all(np.diff(grid) > 0.0)
    assert np.allclose(default_rho_grid(np.eye(1)), 0.999)


def test_tube_rejects_bad_grid(scalar_clfr, scalar_open_lfr, scalar_constraints):
    F0 = uncertainty_factor(scalar_open_lfr, None)
    with pytest.raises(ModelValidationError) as excinfo:
        design_tube(scalar_clfr, None, F0, scalar_constraints, rho_grid=[0.5, 1.0])
    assert str(excinfo.value) == "rho grid values must lie in (0, 1)"


def test_tube_infeasible_below_spectral_radius(
    scalar_clfr, scalar_open_lfr, scalar_constraints
):
    rho = 0.5 * spectral_radius(scalar_clfr.A_cal_hat)
    F0 = uncertainty_factor(scalar_open_lfr, None)
    with pytest.raises(SolverError) as excinfo:
        design_tube(scalar_clfr, None, F0, scalar_constraints, rho_grid=[rho])
    assert str(excinfo.value) == "no common Lyapunov tube for this confidence set"


def test_covariance_bounds_dominate_propagation(scalar_clfr, scalar_constraints):
    Sigma0 = blkdiag(1e-6 * np.eye(1), np.zeros((1, 1)))
    cov = design_error_covariance(scalar_clfr, None, Sigma0, scalar_constraints, N=4)
    A, W = scalar_clfr.A_cal_hat, scalar_clfr.B_d @ scalar_clfr.B_d.T
    assert len(cov.Sigma_bar) == 5
    assert np.allclose(cov.Sigma_bar[0], Sigma0)
    for now, nxt in zip(cov.Sigma_bar, cov.Sigma_bar[1:]):
        assert la.eigvalsh(nxt - A @ now @ A.T - W).min() >= -1e-6
    stationary = cov.stationary
    assert la.eigvalsh(stationary - A @ stationary @ A.T - W).min() >= -1e-6


def test_covariance_without_horizon(scalar_clfr, scalar_constraints):
    Sigma0 = blkdiag(0.5 * np.eye(1), np.zeros((1, 1)))
    cov = design_error_covariance(scalar_clfr, None, Sigma0, scalar_constraints, N=0)
    assert len(cov.Sigma_bar) == 1
    assert la.eigvalsh(cov.stationary - Sigma0).min() >= -1e-6


def test_scalar_design(scalar_design, scalar_constraints):
    d = scalar_design
    assert d.N == 5 and d.horizon == 10 and not d.nominal
    assert d.c.shape == (scalar_constraints.r, 6)
    assert 0.0 < d.rho < 1.0 and d.c_lower > 0.0
    assert np.all(d.c < 1.0) and np.all(d.f > 0.0)
    assert np.allclose(d.tightening(50), d.c_stationary)
    assert np.allclose(d.mu_xi0, [0.5, 0.0])
    assert d.sigma_bar > 0.0
    assert np.allclose(d.Sigma_bar[0], np.diag([1e-6, 0.0]))


def test_robust_covariance_bound_covers_samples(
    scalar_design, scalar_open_lfr, scalar_ellipsoid, scalar_clfr, rng
):
    W = scalar_clfr.B_d @ scalar_clfr.B_d.T
    S = scalar_design.Sigma_stationary
    for v in scalar_ellipsoid.sample(10, rng, boundary=True):
        A_cal, _ = uncertain_closed_loop(scalar_clfr, scalar_open_lfr, v)
        assert la.eigvalsh(S - A_cal @ S @ A_cal.T - W).min() >= -1e-6


def test_nominal_design(
    scalar_open_lfr, scalar_lqg, scalar_truth, scalar_perf, scalar_constraints
):
    d = design_mpc(
        scalar_open_lfr,
        scalar_lqg,
        None,
        scalar_truth.Q,
        scalar_truth.R,
        scalar_perf,
        scalar_constraints,
        mu_x0=np.array([0.5]),
        Sigma_x0=1e-6 * np.eye(1),
        N=3,
        horizon=5,
        threads=1,
    )
    assert d.nominal
    assert not np.any(d.Sigma_J_bar)
    assert d.sigma_bar == pytest.approx(0.0, abs=1e-12)


def test_design_rejects_channel_kind(
    scalar_open_lfr, scalar_lqg, scalar_ellipsoid, scalar_truth, scalar_perf, scalar_constraints
):
    with pytest.raises(ModelValidationError) as excinfo:
        design_mpc(
            scalar_open_lfr,
            scalar_lqg,
            scalar_ellipsoid,
            scalar_truth.Q,
            scalar_truth.R,
            scalar_perf,
            scalar_constraints,
            mu_x0=np.zeros(1),
            Sigma_x0=np.eye(1),
            channel_kind="ball",
        )
    assert (
        str(excinfo.value)
        == "channel kind 'ball' must be one of the following: full, scalar"
    )


def test_tube_contains_sampled_systems(
    scalar_design, scalar_clfr, scalar_open_lfr, scalar_ellipsoid, rng
):
    d = scalar_design
    assert np.allclose(scalar_clfr.A_cal_hat, d.A_cal_hat)
    samples = scalar_ellipsoid.sample(20, rng, boundary=True)
    for mode in ("soc", "lmi"):
        plan = build_and_solve_ocp(d, initial_state(d), mode)
        for v in samples:
            A_cal, B_nu = uncertain_closed_loop(scalar_clfr, scalar_open_lfr, v)
            xi = d.mu_xi0.copy()
            for i in range(plan.horizon + 1):
                e = xi - plan.xi_bar[i]
                assert np.sqrt(e @ d.P @ e) <= plan.alpha[i] + 1e-6
                if i < plan.horizon:
                    xi = A_cal @ xi + B_nu @ plan.nu[i]


def test_covariance_bounds_cover_sampled_systems(
    scalar_design, scalar_clfr, scalar_open_lfr, scalar_ellipsoid, rng
):
    d = scalar_design
    W = scalar_clfr.B_d @ scalar_clfr.B_d.T
    for v in scalar_ellipsoid.sample(10, rng, boundary=True):
        A_cal, _ = uncertain_closed_loop(scalar_clfr, scalar_open_lfr, v)
        Sigma = d.Sigma_bar[0]
        for t in range(3 * d.N + 1):
            bound = d.Sigma_bar[min(t, d.N)]
            assert la.eigvalsh(bound - Sigma).min() >= -1e-6
            Sigma = A_cal @ Sigma @ A_cal.T + W


def test_chain_design(msd2):
    truth, model = msd2
    theta = theta_from_truth(model, truth)
    ellipsoid = confidence_ellipsoid(
        theta.vartheta, 1e6 * np.eye(model.n_theta), 0.95
    )
    open_lfr = build_open_lfr(model, ellipsoid)
    perf = msd_performance(truth)
    lqg = nominal_lqg(open_lfr, truth.Q, truth.R, perf)
    clfr = closed_loop_of(lqg, open_lfr, truth.Q, truth.R, perf)
    low = min(spectral_radius(clfr.A_cal_hat) + 0.01, 0.99)
    scenario = msd_scenario(truth)
    d = design_mpc(
        open_lfr,
        lqg,
        ellipsoid,
        truth.Q,
        truth.R,
        perf,
        scenario.constraints,
        mu_x0=scenario.truth.x0_mean,
        Sigma_x0=scenario.truth.x0_cov,
        N=3,
        horizon=8,
        rho_grid=np.geomspace(low, 0.999, 3),
        threads=1,
    )
    assert d.n_x == 4 and d.n_u == 2 and d.n_xi == 8
    assert d.P.shape == (8, 8) and d.c.shape == (8, 4)
    assert 0.0 < d.rho < 1.0 and d.c_lower > 0.0
    plan = OnlineMpc(d).solve(initial_state(d))
    assert plan is not None
    assert check_candidate(d, plan, 0, tol=1e-5) == []
