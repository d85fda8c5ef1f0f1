# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Offline quantities of the stochastic predictive controller.

Given a robust controller, the design fixes

- the tube shape P and contraction rate rho of the nominal-state tube,
- an upper bound on the error covariance over the horizon and in steady state,
- the tightening constants c[j, t] (stochastic) and f[j] (tube),
- the terminal set and terminal weight.

Passing `ellipsoid=None` to `design_mpc` ignores the parametric uncertainty
and yields the nominal stochastic MPC baseline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, cast

import cvxpy as cp
import numpy as np
from scipy import linalg as la
from scipy.stats import norm

from d2pc.lib.common import (
    blkdiag,
    parallel_map,
    psd_inv_sqrt,
    psd_sqrt,
    spectral_radius,
    sym,
)
from d2pc.lib.conic import ConicProblem, Operand, block, kron
from d2pc.lib.lfr import (
    CHANNEL_KINDS,
    DEFAULT_MARGIN,
    ClosedLoopLfr,
    OpenLoopLfr,
    UncertaintyChannel,
    channel_lyapunov_lmi,
    make_channel,
)
from d2pc.lib.synth import PerformanceSpec, RobustController, closed_loop_of
from d2pc.lib.uq import UncertaintyEllipsoid
from d2pc.lib.validation import (
    ModelValidationError,
    SolverError,
    check_posdef,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

DEFAULT_N: Final = 20
DEFAULT_HORIZON: Final = 30
RHO_GRID_POINTS: Final = 12
RHO_MAX: Final = 0.999
# Keeps the covariance bounds finite when every level is 0.5.
_TRACE_WEIGHT: Final = 1e-6


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Chance constraints Pr(h_j^T [x; u] <= 1) >= p_j, one row of `H` per j."""

    H: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, float))
        p = np.asarray(self.p, float).reshape(-1)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "p", p)
        if H.shape[0] < 1:
            raise ModelValidationError("at least one constraint is required")
        check_shape("p", p, (H.shape[0],))
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ModelValidationError(
                "constraint probability levels must lie in (0, 1)"
            )

    @property
    def r(self) -> int:
        return int(self.H.shape[0])

    @classmethod
    def from_bounds(
        cls,
        n_x: int,
        n_u: int,
        p: float,
        state_bounds: Optional[Sequence[Tuple[int, float]]] = None,
        input_bounds: Optional[Sequence[Tuple[int, float]]] = None,
    ) -> ConstraintSpec:
        """Return symmetric bounds |x_i| <= b and |u_k| <= b as 2 rows each."""
        rows = []
        for offset, bounds in ((0, state_bounds), (n_x, input_bounds)):
            for index, bound in bounds or ():
                if not bound > 0.0:
                    raise ModelValidationError(
                        f"bound {bound} on coordinate {index} must be positive"
                    )
                h = np.zeros(n_x + n_u)
                h[offset + index] = 1.0 / bound
                rows += [h, -h]
        if not rows:
            raise ModelValidationError("at least one bound is required")
        H = np.vstack(rows)
        return cls(H, np.full(H.shape[0], p))


# TUBE


@dataclass(frozen=True, eq=False)
class TubeDesign:
    P: np.ndarray
    rho: float
    X_P: np.ndarray
    objective: float
    gammas: np.ndarray
    grid: List[Tuple[float, str]]


def uncertainty_factor(
    open_lfr: OpenLoopLfr, ellipsoid: Optional[UncertaintyEllipsoid]
) -> np.ndarray:
    """Return J Sigma_vartheta_delta^(1/2); zero when uncertainty is ignored."""
    if ellipsoid is None:
        return np.zeros(open_lfr.J.shape)
    return cast(np.ndarray, open_lfr.J @ ellipsoid.sqrt)


def default_rho_grid(A_cal_hat: np.ndarray) -> np.ndarray:
    rho_nom = spectral_radius(A_cal_hat)
    low = min(rho_nom + 0.01, RHO_MAX)
    return cast(np.ndarray, np.geomspace(low, RHO_MAX, RHO_GRID_POINTS))


def _tube_at(
    rho: float,
    clfr: ClosedLoopLfr,
    channel: Optional[UncertaintyChannel],
    F0: np.ndarray,
    constraints: ConstraintSpec,
    margin: float,
) -> Tuple[str, Optional[float], Optional[np.ndarray], Optional[np.ndarray]]:
    n = clfr.n_xi
    G = clfr.G
    prob = ConicProblem(f"tube(rho={rho:.4f})")
    X_P = prob.variable("X_P", (n, n), symmetric=True)
    channel_lyapunov_lmi(
        prob,
        channel,
        clfr.A_cal_hat,
        clfr.B_p,
        G,
        X_now=X_P,
        X_next=rho ** 2 * X_P,
        W=np.zeros((n, n)),
        margin=margin,
    )
    gammas = prob.variable("gamma", constraints.r)
    for i, h in enumerate(constraints.H):
        g = G.T @ h
        prob.add(gammas[i] >= g @ X_P @ g)
    if channel is None:
        # Nothing bounds the scale of a nominal tube shape.
        prob.add(cp.trace(X_P) == n)
    else:
        N = F0.T @ np.kron(G, clfr.B_p.T)
        prob.add_psd(
            block(
                [
                    [(1.0 - rho) ** 2 * np.eye(N.shape[0]), N],
                    [N.T, kron(np.eye(G.shape[1]), X_P)],
                ]
            )
        )
    prob.minimize(cp.sum(gammas))
    report = prob.solve()
    _log.debug(f"tube rho={rho:.4f}: {report.status}")
    if not report.ok:
        return report.status, None, None, None
    return report.status, report.objective, report["X_P"], report["gamma"]


def design_tube(
    clfr: ClosedLoopLfr,
    channel: Optional[UncertaintyChannel],
    F0: np.ndarray,
    constraints: ConstraintSpec,
    rho_grid: Optional[Sequence[float]] = None,
    margin: float = DEFAULT_MARGIN,
    threads: Optional[int] = None,
) -> TubeDesign:
    """Line search over rho for the tube shape with the smallest nominal tightening.

    `F0` is `uncertainty_factor(...)`.  Every grid point is an independent
    semidefinite program; the feasible one with the smallest objective wins.
    """
    grid = (
        default_rho_grid(clfr.A_cal_hat)
        if rho_grid is None
        else np.asarray(rho_grid, float)
    )
    if grid.size == 0 or np.any(grid <= 0.0) or np.any(grid >= 1.0):
        raise ModelValidationError("rho grid values must lie in (0, 1)")
    check_shape("H", constraints.H, (None, clfr.G.shape[0]))

    def solve(rho: float) -> Tuple[
        str, Optional[float], Optional[np.ndarray], Optional[np.ndarray]
    ]:
        return _tube_at(rho, clfr, channel, F0, constraints, margin)

    results = parallel_map(solve, [float(r) for r in grid], threads)
    best = None
    for rho, (status, objective, X_P, gammas) in zip(grid, results):
        if objective is None:
            continue
        if best is None or objective < best[1]:
            best = (float(rho), objective, X_P, gammas)
    if best is None:
        raise SolverError(
            "no common Lyapunov tube for this confidence set", "infeasible"
        )
    rho, objective, X_P, gammas = best
    X_P = sym(cast(np.ndarray, X_P))
    _log.debug(f"tube design: rho {rho:.4f}, objective {objective:.6g}")
    return TubeDesign(
        P=sym(la.inv(X_P)),
        rho=rho,
        X_P=X_P,
        objective=objective,
        gammas=cast(np.ndarray, gammas),
        grid=[(float(r), res[0]) for r, res in zip(grid, results)],
    )


def tube_factors(
    P: np.ndarray, B_p: np.ndarray, F0: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (F, Sigma_J_bar) for the tube increments.

    The parametric term of the nominal-state error at z is H(z) s with
    ||s|| <= 1 and H(z) = sum_k z_k F_k, F_k the k-th block of rows of F.
    Sigma_J_bar[k, l] = tr(F_k F_l^T) bounds ||H(z)|| through a single norm.
    """
    n_xi, n_w = B_p.shape
    m = F0.shape[0] // n_w
    F = np.kron(np.eye(m), psd_sqrt(P) @ B_p) @ F0
    blocks = F.reshape(m, n_xi, F.shape[1])
    Sigma_J_bar = np.einsum("kin,lin->kl", blocks, blocks)
    return F, sym(Sigma_J_bar)


# ERROR COVARIANCE


@dataclass(frozen=True, eq=False)
class CovarianceDesign:
    Sigma_bar: List[np.ndarray]
    objective: float

    @property
    def stationary(self) -> np.ndarray:
        return self.Sigma_bar[-1]


def design_error_covariance(
    clfr: ClosedLoopLfr,
    channel: Optional[UncertaintyChannel],
    Sigma_xi0: np.ndarray,
    constraints: ConstraintSpec,
    N: int = DEFAULT_N,
    margin: float = DEFAULT_MARGIN,
) -> CovarianceDesign:
    """Bound the error covariance for t = 0..N, the last bound being stationary.

    Solves one semidefinite program with a robust covariance step per t
    (each with its own multiplier) and a robust stationarity condition at
    N, minimizing the squared stochastic tightenings.  With N = 0 only the
    stationary bound is computed and it must dominate `Sigma_xi0`.
    """
    n = clfr.n_xi
    if N < 0:
        raise ModelValidationError(f"horizon N = {N} must be non-negative")
    check_shape("Sigma_xi0", Sigma_xi0, (n, n))
    check_posdef("Sigma_xi0", sym(Sigma_xi0), semi=True)
    G = clfr.G
    W = clfr.B_d @ clfr.B_d.T
    weights = norm.ppf(constraints.p) ** 2
    gs = constraints.H @ G

    prob = ConicProblem(f"error_covariance(N={N})")
    Sigma: List[Operand] = []
    if N == 0:
        S0 = prob.variable("Sigma_0", (n, n), symmetric=True)
        prob.add_psd(S0 - Sigma_xi0)
        Sigma.append(S0)
    else:
        Sigma.append(sym(Sigma_xi0))
        for t in range(1, N + 1):
            Sigma.append(prob.variable(f"Sigma_{t}", (n, n), symmetric=True))
    for t in range(N):
        channel_lyapunov_lmi(
            prob,
            channel,
            clfr.A_cal_hat,
            clfr.B_p,
            G,
            X_now=Sigma[t],
            X_next=Sigma[t + 1],
            W=W,
            name=f"Lambda_{t}",
            margin=margin,
        )
    channel_lyapunov_lmi(
        prob,
        channel,
        clfr.A_cal_hat,
        clfr.B_p,
        G,
        X_now=Sigma[N],
        X_next=Sigma[N],
        W=W,
        name="Lambda_stationary",
        margin=margin,
    )
    steps = [0] if N == 0 else list(range(1, N + 1))
    gamma = prob.variable("gamma", (constraints.r, len(steps)))
    for col, t in enumerate(steps):
        for i, g in enumerate(gs):
            prob.add(gamma[i, col] >= weights[i] * (g @ Sigma[t] @ g))
    regularization = sum(cp.trace(Sigma[t]) for t in steps)
    prob.minimize(cp.sum(gamma) + _TRACE_WEIGHT * regularization)
    report = prob.solve().require(
        "error covariance bound (inconsistent with the robust controller certificate)"
    )

    sequence = [
        sym(report[f"Sigma_{t}"]) if t > 0 or N == 0 else sym(Sigma_xi0)
        for t in range(N + 1)
    ]
    _log.debug(
        f"error covariance bound: stationary trace {np.trace(sequence[-1]):.6g}"
    )
    return CovarianceDesign(
        Sigma_bar=sequence, objective=cast(float, report.objective)
    )


# TIGHTENING AND TERMINAL INGREDIENTS


def tightening_terms(
    Sigma_bar: Sequence[np.ndarray],
    P: np.ndarray,
    G: np.ndarray,
    constraints: ConstraintSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (c, f): c[j, t] for every bound in `Sigma_bar`, f[j] for the tube.

    c[j, t] = Phi^-1(p_j) ||Sigma_bar[t]^(1/2) G^T h_j|| and
    f[j] = ||P^(-1/2) G^T h_j||.  Levels below 0.5 give negative c.
    """
    gs = constraints.H @ G
    quantiles = norm.ppf(constraints.p)
    c = np.empty((constraints.r, len(Sigma_bar)))
    for t, Sigma in enumerate(Sigma_bar):
        spread = np.einsum("ji,ik,jk->j", gs, Sigma, gs)
        c[:, t] = quantiles * np.sqrt(np.maximum(spread, 0.0))
    for j in range(constraints.r):
        if np.any(c[j] >= 1.0):
            raise ModelValidationError(
                f"constraint {j} unsatisfiable at level {constraints.p[j]:g}"
            )
    P_inv = la.inv(P)
    f = np.sqrt(np.maximum(np.einsum("ji,ik,jk->j", gs, P_inv, gs), 0.0))
    return c, f


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Terminal set {(xi, alpha): ||xi||_P + alpha <= c_lower, ||xi||_P sigma_bar <= (1 - rho) c_lower}."""

    c_lower: float
    sigma_bar: float
    S_xi_c: np.ndarray


def design_terminal(
    P: np.ndarray,
    c: np.ndarray,
    f: np.ndarray,
    Sigma_J_bar: np.ndarray,
    G: np.ndarray,
    A_cal_hat: np.ndarray,
    Q_xi_c: np.ndarray,
) -> TerminalIngredients:
    """Return the terminal set constants and the terminal weight.

    The last column of `c` is the stationary tightening, which also bounds
    every later time step.
    """
    active = f > 0.0
    if not np.any(active):
        raise ModelValidationError(
            "no constraint depends on the closed-loop state"
        )
    c_lower = float(np.min((1.0 - c[active]) / f[active, None]))
    if not c_lower > 0.0:
        raise ModelValidationError("terminal set empty")
    sigma_bar = float(
        la.svdvals(psd_sqrt(Sigma_J_bar) @ G @ psd_inv_sqrt(P))[0]
    )
    S = la.solve_discrete_lyapunov(A_cal_hat.T, Q_xi_c)
    return TerminalIngredients(
        c_lower=c_lower, sigma_bar=sigma_bar, S_xi_c=sym(S)
    )


# FULL DESIGN


@dataclass(frozen=True, eq=False)
class MpcDesign:
    """Everything the online controller needs, fixed offline."""

    P: np.ndarray
    rho: float
    Sigma_bar: List[np.ndarray]
    c: np.ndarray
    f: np.ndarray
    Sigma_J_bar: np.ndarray
    Sigma_J_half: np.ndarray
    c_lower: float
    sigma_bar: float
    S_xi_c: np.ndarray
    A_cal_hat: np.ndarray
    B_nu_hat: np.ndarray
    A_c: np.ndarray
    K: np.ndarray
    L: np.ndarray
    Q_c: np.ndarray
    R_c: np.ndarray
    constraints: ConstraintSpec
    mu_xi0: np.ndarray
    horizon: int = DEFAULT_HORIZON
    nominal: bool = False

    @property
    def n_x(self) -> int:
        return int(self.K.shape[1])

    @property
    def n_u(self) -> int:
        return int(self.K.shape[0])

    @property
    def n_xi(self) -> int:
        return int(self.A_cal_hat.shape[0])

    @property
    def N(self) -> int:
        return len(self.Sigma_bar) - 1

    @property
    def G(self) -> np.ndarray:
        return blkdiag(np.eye(self.n_x), self.K)

    @property
    def Q_xi_c(self) -> np.ndarray:
        return blkdiag(self.Q_c, self.K.T @ self.R_c @ self.K)

    @property
    def Sigma_stationary(self) -> np.ndarray:
        return self.Sigma_bar[-1]

    @property
    def c_stationary(self) -> np.ndarray:
        return cast(np.ndarray, self.c[:, -1])

    def tightening(self, t: int) -> np.ndarray:
        """Return c[:, t], using the stationary value beyond N."""
        return cast(np.ndarray, self.c[:, min(t, self.N)])


def design_mpc(
    open_lfr: OpenLoopLfr,
    controller: RobustController,
    ellipsoid: Optional[UncertaintyEllipsoid],
    Q: np.ndarray,
    R: np.ndarray,
    perf: PerformanceSpec,
    constraints: ConstraintSpec,
    mu_x0: np.ndarray,
    Sigma_x0: np.ndarray,
    channel_kind: str = "full",
    N: int = DEFAULT_N,
    horizon: int = DEFAULT_HORIZON,
    rho_grid: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> MpcDesign:
    """Run the whole offline predictive-controller design.

    The controller state starts at zero, so the nominal initial state is
    [mu_x0; 0] and the initial error covariance is diag(Sigma_x0, 0).
    """
    if channel_kind not in CHANNEL_KINDS:
        raise ModelValidationError(
            f"channel kind '{channel_kind}' must be one of the following: {', '.join(CHANNEL_KINDS)}"
        )
    if horizon < 1:
        raise ModelValidationError(f"horizon {horizon} must be positive")
    n_x = open_lfr.n_x
    mu_x0 = np.asarray(mu_x0, float).reshape(-1)
    check_shape("mu_x0", mu_x0, (n_x,))
    check_shape("Sigma_x0", Sigma_x0, (n_x, n_x))
    check_shape("H", constraints.H, (None, n_x + controller.K.shape[0]))

    clfr = closed_loop_of(controller, open_lfr, Q, R, perf)
    channel = make_channel(open_lfr, ellipsoid, channel_kind)
    F0 = uncertainty_factor(open_lfr, ellipsoid)

    tube = design_tube(clfr, channel, F0, constraints, rho_grid, threads=threads)
    Sigma_xi0 = blkdiag(sym(Sigma_x0), np.zeros((n_x, n_x)))
    cov = design_error_covariance(clfr, channel, Sigma_xi0, constraints, N)
    F, Sigma_J_bar = tube_factors(tube.P, clfr.B_p, F0)
    c, f = tightening_terms(cov.Sigma_bar, tube.P, clfr.G, constraints)
    Q_xi_c = blkdiag(perf.Q_c, controller.K.T @ perf.R_c @ controller.K)
    terminal = design_terminal(
        tube.P, c, f, Sigma_J_bar, clfr.G, clfr.A_cal_hat, Q_xi_c
    )
    _log.info(
        f"predictive controller designed: rho {tube.rho:.4f}, terminal level {terminal.c_lower:.4g}"
    )
    return MpcDesign(
        P=tube.P,
        rho=tube.rho,
        Sigma_bar=cov.Sigma_bar,
        c=c,
        f=f,
        Sigma_J_bar=Sigma_J_bar,
        Sigma_J_half=F,
        c_lower=terminal.c_lower,
        sigma_bar=terminal.sigma_bar,
        S_xi_c=terminal.S_xi_c,
        A_cal_hat=clfr.A_cal_hat,
        B_nu_hat=clfr.B_nu_hat,
        A_c=controller.A_c,
        K=controller.K,
        L=controller.L,
        Q_c=perf.Q_c,
        R_c=perf.R_c,
        constraints=constraints,
        mu_xi0=np.concatenate([mu_x0, np.zeros(n_x)]),
        horizon=horizon,
        nominal=ellipsoid is None,
    )
