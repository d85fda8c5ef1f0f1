# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Receding-horizon control with homothetic tubes.

At every step the controller plans nominal closed-loop states xi_bar, tube
scalings alpha and input corrections nu, applies u = K x_c + nu[0] and
carries (xi_bar[1], alpha[1]) to the next step.  The parametric part of
the tube grows through either a second-order cone ("soc") or the exact
singular-value bound ("lmi").
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, cast

import cvxpy as cp
import numpy as np
from scipy import linalg as la

from d2pc.lib.common import psd_sqrt
from d2pc.lib.conic import ConicProblem, block
from d2pc.lib.mpcdesign import MpcDesign
from d2pc.lib.validation import (
    InfeasibleStartError,
    ModelValidationError,
    check_shape,
    validate_mode,
)

_log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class OcpSolution:
    """A plan over the horizon; `alpha` holds the tight tube scalings."""

    nu: np.ndarray
    xi_bar: np.ndarray
    alpha: np.ndarray
    objective: float
    status: str
    solve_time: float = 0.0

    @property
    def horizon(self) -> int:
        return int(self.nu.shape[0])


@dataclass(frozen=True, eq=False)
class MpcState:
    x_c: np.ndarray
    alpha_next: float
    xi_bar_next: np.ndarray
    t: int = 0
    plan: Optional[OcpSolution] = None

    def __post_init__(self) -> None:
        if self.alpha_next < 0.0:
            raise ModelValidationError(
                f"carried tube scaling {self.alpha_next} must be non-negative"
            )


def initial_state(design: MpcDesign) -> MpcState:
    """Return the state before the first step: alpha = 0, xi_bar = mu_xi0."""
    return MpcState(
        x_c=design.mu_xi0[design.n_x :].copy(),
        alpha_next=0.0,
        xi_bar_next=design.mu_xi0.copy(),
    )


def _z(design: MpcDesign, xi_bar: np.ndarray, nu: np.ndarray) -> np.ndarray:
    z = design.G @ xi_bar
    z[design.n_x :] += nu
    return cast(np.ndarray, z)


def tube_increment(
    design: MpcDesign, xi_bar: np.ndarray, nu: np.ndarray, mode: str = "soc"
) -> float:
    """Return the parametric growth of the tube at one predicted step."""
    z = _z(design, xi_bar, nu)
    if mode == "soc":
        return float(np.linalg.norm(psd_sqrt(design.Sigma_J_bar) @ z))
    F = design.Sigma_J_half
    H = np.tensordot(z, F.reshape(z.shape[0], design.n_xi, F.shape[1]), 1)
    return float(la.svdvals(H)[0]) if H.size else 0.0


def propagate_tube(
    design: MpcDesign,
    xi_bar0: np.ndarray,
    alpha0: float,
    nu: np.ndarray,
    mode: str = "soc",
) -> Tuple[np.ndarray, np.ndarray]:
    """Return nominal states and tight tube scalings along the input plan `nu`."""
    validate_mode(mode)
    T = nu.shape[0]
    xi = np.empty((T + 1, design.n_xi))
    alpha = np.empty(T + 1)
    xi[0], alpha[0] = xi_bar0, alpha0
    for i in range(T):
        xi[i + 1] = design.A_cal_hat @ xi[i] + design.B_nu_hat @ nu[i]
        alpha[i + 1] = design.rho * alpha[i] + tube_increment(
            design, xi[i], nu[i], mode
        )
    return xi, alpha


def plan_cost(design: MpcDesign, xi_bar: np.ndarray, nu: np.ndarray) -> float:
    Q, R, S = design.Q_xi_c, design.R_c, design.S_xi_c
    stage = np.einsum("ti,ij,tj->", xi_bar[:-1], Q, xi_bar[:-1])
    stage += np.einsum("ti,ij,tj->", nu, R, nu)
    return float(stage + xi_bar[-1] @ S @ xi_bar[-1])


def shifted_candidate(
    design: MpcDesign, solution: OcpSolution, mode: str = "soc"
) -> OcpSolution:
    """Shift a plan by one step and append the terminal controller (nu = 0)."""
    nu = np.vstack([solution.nu[1:], np.zeros((1, design.n_u))])
    xi, alpha = propagate_tube(
        design, solution.xi_bar[1], float(solution.alpha[1]), nu, mode
    )
    return OcpSolution(
        nu=nu,
        xi_bar=xi,
        alpha=alpha,
        objective=plan_cost(design, xi, nu),
        status="candidate",
    )


def check_candidate(
    design: MpcDesign,
    candidate: OcpSolution,
    t: int,
    mode: str = "soc",
    tol: float = 1e-8,
) -> List[str]:
    """Return the conditions a plan starting at time `t` violates; empty if feasible."""
    problems = []
    xi, nu, alpha = candidate.xi_bar, candidate.nu, candidate.alpha
    predicted = xi[:-1] @ design.A_cal_hat.T + nu @ design.B_nu_hat.T
    if np.abs(xi[1:] - predicted).max(initial=0.0) > 1e-7:
        problems.append("nominal dynamics")
    for i in range(candidate.horizon):
        growth = design.rho * alpha[i] + tube_increment(design, xi[i], nu[i], mode)
        if alpha[i + 1] < growth - tol:
            problems.append(f"tube recursion at step {i}")
        lhs = design.constraints.H @ _z(design, xi[i], nu[i])
        rhs = 1.0 - design.tightening(t + i) - alpha[i] * design.f
        if np.any(lhs > rhs + tol):
            problems.append(f"tightened constraints at step {i}")
    level = float(np.sqrt(max(xi[-1] @ design.P @ xi[-1], 0.0)))
    if level + alpha[-1] > design.c_lower + tol:
        problems.append("terminal level")
    if level * design.sigma_bar > (1.0 - design.rho) * design.c_lower + tol:
        problems.append("terminal contraction")
    return problems


class OnlineMpc:
    """The per-step optimal control problem, compiled once and re-solved.

    Only the initial pair and the window of stochastic tightenings change
    between steps, so they are problem parameters.
    """

    def __init__(
        self,
        design: MpcDesign,
        mode: str = "soc",
        check_candidates: bool = False,
    ) -> None:
        self.design = design
        self.mode = validate_mode(mode)
        self.check_candidates = check_candidates
        self.infeasible_solves = 0
        self.candidate_failures = 0
        self._prob = self._build()

    def _build(self) -> ConicProblem:
        d = self.design
        T, n_xi, n_u, r = d.horizon, d.n_xi, d.n_u, d.constraints.r
        prob = ConicProblem(f"mpc({self.mode})")
        xi0 = prob.parameter("xi0", n_xi)
        alpha0 = prob.parameter("alpha0")
        window = prob.parameter("c_window", (r, T))
        nu = prob.variable("nu", (T, n_u))
        xi = prob.variable("xi_bar", (T + 1, n_xi))
        alpha = prob.variable("alpha", T + 1, nonneg=True)

        prob.add(xi[0] == xi0)
        prob.add(alpha[0] == alpha0)
        select = np.vstack([np.zeros((d.n_x, n_u)), np.eye(n_u)])
        Sigma_half = psd_sqrt(d.Sigma_J_bar)
        F = d.Sigma_J_half
        m = d.G.shape[0]
        blocks = [F[k * n_xi : (k + 1) * n_xi] for k in range(m)]
        Q_half = psd_sqrt(d.Q_xi_c)
        R_half = psd_sqrt(d.R_c)
        costs: List[cp.Expression] = []
        for i in range(T):
            prob.add(xi[i + 1] == d.A_cal_hat @ xi[i] + d.B_nu_hat @ nu[i])
            z = d.G @ xi[i] + select @ nu[i]
            if self.mode == "soc":
                prob.add_soc(Sigma_half @ z, alpha[i + 1] - d.rho * alpha[i])
            else:
                s = prob.variable(f"s_{i}", nonneg=True)
                H = sum(z[k] * blocks[k] for k in range(m))
                I_rows, I_cols = np.eye(n_xi), np.eye(F.shape[1])
                prob.add_psd(block([[s * I_rows, H], [H.T, s * I_cols]]))
                prob.add(alpha[i + 1] >= d.rho * alpha[i] + s)
            prob.add(
                d.constraints.H @ z
                <= 1.0 - window[:, i] - alpha[i] * d.f
            )
            costs.append(cp.sum_squares(Q_half @ xi[i]))
            costs.append(cp.sum_squares(R_half @ nu[i]))
        level = prob.variable("terminal_level", nonneg=True)
        prob.add_soc(psd_sqrt(d.P) @ xi[T], level)
        prob.add(level + alpha[T] <= d.c_lower)
        if d.sigma_bar > 0.0:
            prob.add(level * d.sigma_bar <= (1.0 - d.rho) * d.c_lower)
        costs.append(cp.sum_squares(psd_sqrt(d.S_xi_c) @ xi[T]))
        prob.minimize(sum(costs))
        return prob

    def solve(self, state: MpcState) -> Optional[OcpSolution]:
        """Solve the problem for `state`; None if no solution was found."""
        d = self.design
        check_shape("xi_bar_next", state.xi_bar_next, (d.n_xi,))
        self._prob.set_parameter("xi0", state.xi_bar_next)
        self._prob.set_parameter("alpha0", state.alpha_next)
        self._prob.set_parameter(
            "c_window",
            np.column_stack(
                [d.tightening(state.t + i) for i in range(d.horizon)]
            ),
        )
        report = self._prob.solve()
        _log.debug(f"step {state.t}: {report.status}")
        if not report.ok:
            return None
        nu = report["nu"].reshape(d.horizon, d.n_u)
        xi, alpha = propagate_tube(
            d, state.xi_bar_next, state.alpha_next, nu, self.mode
        )
        return OcpSolution(
            nu=nu,
            xi_bar=xi,
            alpha=alpha,
            objective=plan_cost(d, xi, nu),
            status=report.status,
            solve_time=report.wall_time,
        )

    def step(
        self, state: MpcState, y: np.ndarray
    ) -> Tuple[np.ndarray, OcpSolution, MpcState]:
        """Return (u_t, plan, next state) for the measurement `y` at `state.t`."""
        d = self.design
        candidate = None
        if state.plan is not None:
            candidate = shifted_candidate(d, state.plan, self.mode)
            if self.check_candidates:
                problems = check_candidate(d, candidate, state.t, self.mode)
                if problems:
                    self.candidate_failures += 1
                    _log.warning(
                        f"step {state.t}: shifted candidate violates {', '.join(problems)}"
                    )
        solution = self.solve(state)
        if solution is None:
            self.infeasible_solves += 1
            if candidate is None:
                raise InfeasibleStartError(
                    "predictive control problem infeasible at the first step",
                    "infeasible",
                )
            _log.warning(
                f"step {state.t}: problem reported infeasible, applying the shifted candidate; recursive feasibility violated"
            )
            solution = replace(candidate, status="fallback")
        u = d.K @ state.x_c + solution.nu[0]
        x_c = d.A_c @ state.x_c + d.L @ np.asarray(y, float)
        next_state = MpcState(
            x_c=x_c,
            alpha_next=float(solution.alpha[1]),
            xi_bar_next=solution.xi_bar[1].copy(),
            t=state.t + 1,
            plan=solution,
        )
        return u, solution, next_state


def build_and_solve_ocp(
    design: MpcDesign, state: MpcState, mode: str = "soc"
) -> Optional[OcpSolution]:
    """One-off solve of the optimal control problem for `state`."""
    return OnlineMpc(design, mode).solve(state)
