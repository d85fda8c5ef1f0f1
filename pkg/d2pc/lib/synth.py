# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Robust dynamic output-feedback H2 synthesis by D-K iteration.

The D-step fixes the controller and finds multipliers and a Lyapunov
certificate bounding the H2 norm over the whole confidence ellipsoid.  The
K-step fixes the multipliers and solves a convex problem in transformed
controller variables.  The iteration starts from the nominal LQG controller
and keeps the best certified controller.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Tuple

import cvxpy as cp
import numpy as np
from scipy import linalg as la

from d2pc.lib.common import parallel_map, psd_sqrt, spectral_radius, sym
from d2pc.lib.conic import ConicProblem, SolveReport, block
from d2pc.lib.lfr import (
    DEFAULT_MARGIN,
    ClosedLoopLfr,
    OpenLoopLfr,
    UncertaintyChannel,
    build_closed_lfr,
    channel_lyapunov_lmi,
    uncertain_closed_loop,
)
from d2pc.lib.uq import UncertaintyEllipsoid
from d2pc.lib.validation import (
    ModelValidationError,
    NumericalError,
    SolverError,
    check_posdef,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

_COND_WARN: Final = 1e8
_COND_FAIL: Final = 1e12


@dataclass(frozen=True, eq=False)
class PerformanceSpec:
    """Performance output eps = C_eps x + D_eps u with no cross weighting."""

    C_eps: np.ndarray
    D_eps: np.ndarray

    def __post_init__(self) -> None:
        C = np.atleast_2d(np.asarray(self.C_eps, float))
        D = np.atleast_2d(np.asarray(self.D_eps, float))
        check_shape("D_eps", D, (C.shape[0], None))
        object.__setattr__(self, "C_eps", C)
        object.__setattr__(self, "D_eps", D)
        scale = max(1.0, float(np.abs(C).max()), float(np.abs(D).max()))
        if np.abs(C.T @ D).max(initial=0.0) > 1e-10 * scale ** 2:
            raise ModelValidationError(
                "performance output must satisfy C_eps^T D_eps = 0"
            )
        check_posdef("R_c", sym(D.T @ D))

    @classmethod
    def from_weights(cls, Q_c: np.ndarray, R_c: np.ndarray) -> PerformanceSpec:
        """Return eps = [Q_c^(1/2) x; R_c^(1/2) u]."""
        Q_half = psd_sqrt(sym(np.atleast_2d(np.asarray(Q_c, float))))
        R_half = psd_sqrt(sym(np.atleast_2d(np.asarray(R_c, float))))
        n_x, n_u = Q_half.shape[0], R_half.shape[0]
        return cls(
            np.vstack([Q_half, np.zeros((n_u, n_x))]),
            np.vstack([np.zeros((n_x, n_u)), R_half]),
        )

    @property
    def Q_c(self) -> np.ndarray:
        return sym(self.C_eps.T @ self.C_eps)

    @property
    def R_c(self) -> np.ndarray:
        return sym(self.D_eps.T @ self.D_eps)


@dataclass(frozen=True, eq=False)
class RobustController:
    """Dynamic output-feedback controller x_c+ = A_c x_c + L y, u = K x_c.

    `gamma` is a certified H2 bound over the confidence ellipsoid when
    `certified` is set, and the nominal H2 norm otherwise.
    """

    A_c: np.ndarray
    K: np.ndarray
    L: np.ndarray
    gamma: float
    Lambda: Optional[np.ndarray] = None
    X_cal: Optional[np.ndarray] = None
    certified: bool = False
    multiplier: str = "none"
    gamma_trace: List[float] = field(default_factory=list)


def closed_loop_h2(
    A_cal: np.ndarray, B_d: np.ndarray, C_eps: np.ndarray
) -> float:
    """Return the H2 norm of d -> eps; infinite if A_cal is not Schur."""
    if spectral_radius(A_cal) >= 1.0:
        return float("inf")
    X = la.solve_discrete_lyapunov(A_cal, B_d @ B_d.T)
    return float(np.sqrt(max(0.0, np.trace(C_eps @ X @ C_eps.T))))


def nominal_lqg(
    model_hat: OpenLoopLfr,
    Q: np.ndarray,
    R: np.ndarray,
    perf: PerformanceSpec,
) -> RobustController:
    """Return the observer-based LQG controller for the estimated plant."""
    A, B, C, E = model_hat.A_hat, model_hat.B_hat, model_hat.C, model_hat.E
    check_shape("C_eps", perf.C_eps, (None, A.shape[0]))
    check_shape("D_eps", perf.D_eps, (None, B.shape[1]))
    try:
        P = la.solve_discrete_are(A, B, perf.Q_c, perf.R_c)
        P_f = la.solve_discrete_are(A.T, C.T, sym(E @ Q @ E.T), R)
    except (la.LinAlgError, ValueError) as e:
        raise NumericalError(
            f"Riccati equation has no stabilizing solution ({e})"
        ) from None
    K = -la.solve(perf.R_c + B.T @ P @ B, B.T @ P @ A, assume_a="pos")
    L = A @ P_f @ C.T @ la.inv(C @ P_f @ C.T + R)
    A_c = A + B @ K - L @ C
    clfr = build_closed_lfr(model_hat, K, L, A_c, Q, R, perf.C_eps, perf.D_eps)
    gamma = closed_loop_h2(clfr.A_cal_hat, clfr.B_d, clfr.C_eps)
    _log.debug(f"nominal LQG H2 norm {gamma:.6g}")
    return RobustController(A_c=A_c, K=K, L=L, gamma=gamma)


# D-STEP


@dataclass(frozen=True, eq=False)
class DStepResult:
    Lambda: Optional[np.ndarray]
    X_cal: np.ndarray
    objective: float
    report: SolveReport

    @property
    def gamma(self) -> float:
        return float(np.sqrt(max(self.objective, 0.0)))


def _multiplier_value(report: SolveReport, name: str) -> Optional[np.ndarray]:
    if name not in report.values:
        return None
    return np.atleast_2d(report[name])


def d_step(
    clfr: ClosedLoopLfr,
    channel: Optional[UncertaintyChannel],
    margin: float = DEFAULT_MARGIN,
) -> DStepResult:
    """Certify the fixed controller in `clfr`: minimize tr(C_eps X C_eps^T).

    Raises `SolverError` if no certificate exists.
    """
    n = clfr.n_xi
    prob = ConicProblem("d_step")
    X = prob.variable("X_cal", (n, n), symmetric=True)
    prob.add_psd(X, margin=margin)
    channel_lyapunov_lmi(
        prob,
        channel,
        clfr.A_cal_hat,
        clfr.B_p,
        clfr.G,
        X,
        X,
        clfr.B_d @ clfr.B_d.T,
        margin=margin,
    )
    prob.minimize(cp.trace(clfr.C_eps @ X @ clfr.C_eps.T))
    report = prob.solve()
    if not report.ok:
        raise SolverError(
            f"controller not robustly stabilizing for this confidence set (status '{report.status}')",
            report.status,
        )
    report.require("D-step")
    return DStepResult(
        Lambda=_multiplier_value(report, "Lambda"),
        X_cal=sym(report["X_cal"]),
        objective=float(report.objective or 0.0),
        report=report,
    )


# K-STEP


@dataclass(frozen=True, eq=False)
class KStepResult:
    X: np.ndarray
    Y: np.ndarray
    M: np.ndarray
    F: np.ndarray
    S: np.ndarray
    W: np.ndarray
    objective: float


def k_step(
    model_hat: OpenLoopLfr,
    channel: Optional[UncertaintyChannel],
    Lambda: Optional[np.ndarray],
    perf: PerformanceSpec,
    Q: np.ndarray,
    R: np.ndarray,
    margin: float = DEFAULT_MARGIN,
) -> KStepResult:
    """Synthesize transformed controller variables for fixed multipliers.

    Minimizes tr(W) over (X, Y, M, F, S, W) with the congruence-transformed
    stability and performance conditions.
    """
    A, B, C, E = model_hat.A_hat, model_hat.B_hat, model_hat.C, model_hat.E
    n_x, n_u = B.shape
    n_y, n_w = C.shape[0], E.shape[1]
    I = np.eye(n_x)
    EQ = E @ psd_sqrt(Q)
    R_half = psd_sqrt(R)

    prob = ConicProblem("k_step")
    X = prob.variable("X", (n_x, n_x), symmetric=True)
    Y = prob.variable("Y", (n_x, n_x), symmetric=True)
    M = prob.variable("M", (n_u, n_x))
    F = prob.variable("F", (n_x, n_y))
    S = prob.variable("S", (n_x, n_x))
    n_eps = perf.C_eps.shape[0]
    W = prob.variable("W", (n_eps, n_eps), symmetric=True)

    TXT = block([[X, I], [I, Y]])
    TAXT = block([[A @ X + B @ M, A], [S, Y @ A + F @ C]])
    TBd = block(
        [
            [EQ, np.zeros((n_x, n_y))],
            [Y @ EQ, F @ R_half],
        ]
    )
    n_d = n_w + n_y
    n2 = 2 * n_x

    def z(rows: int, cols: int) -> np.ndarray:
        return np.zeros((rows, cols))

    if channel is None:
        lmi = block(
            [
                [-TXT, TAXT, TBd],
                [TAXT.T, -TXT, z(n2, n_d)],
                [TBd.T, z(n_d, n2), -np.eye(n_d)],
            ]
        )
    else:
        if Lambda is None:
            raise ModelValidationError("a robust K-step needs a multiplier")
        value = Lambda if channel.kind == "full" else float(Lambda.ravel()[0])
        Pq, Pp = channel.multipliers(value)
        n_q = channel.n_q
        TBpPp = cp.vstack([E @ Pp, Y @ E @ Pp])
        Cq_T = channel.q_map @ block(
            [[X, I], [M, np.zeros((n_u, n_x))]]
        )
        lmi = block(
            [
                [-TXT, z(n2, n_q), TAXT, TBd, TBpPp],
                [z(n_q, n2), -Pq, Cq_T, z(n_q, n_d), z(n_q, n_w)],
                [TAXT.T, Cq_T.T, -TXT, z(n2, n_d), z(n2, n_w)],
                [TBd.T, z(n_d, n_q), z(n_d, n2), -np.eye(n_d), z(n_d, n_w)],
                [TBpPp.T, z(n_w, n_q), z(n_w, n2), z(n_w, n_d), -Pp],
            ]
        )
    prob.add_psd(-lmi, margin=margin)
    perf_block = cp.hstack([perf.C_eps @ X + perf.D_eps @ M, perf.C_eps])
    prob.add_psd(block([[W, perf_block], [perf_block.T, TXT]]))
    prob.minimize(cp.trace(W))
    report = prob.solve().require("K-step")
    return KStepResult(
        X=sym(report["X"]),
        Y=sym(report["Y"]),
        M=report["M"],
        F=report["F"],
        S=report["S"],
        W=sym(report["W"]),
        objective=float(report.objective or 0.0),
    )


def recover_controller(
    X: np.ndarray,
    Y: np.ndarray,
    M: np.ndarray,
    F: np.ndarray,
    S: np.ndarray,
    model_hat: OpenLoopLfr,
    V: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (A_c, K, L) from the transformed synthesis variables.

    U = V^-1 (I - Y X), K = M U^-1, L = V^-1 F and
    A_c = V^-1 (S - Y A X - F C X - Y B M) U^-1.  `V` defaults to I.
    """
    A, B, C = model_hat.A_hat, model_hat.B_hat, model_hat.C
    n_x = A.shape[0]
    if V is None:
        V = np.eye(n_x)
    V_inv = la.inv(V)
    U = V_inv @ (np.eye(n_x) - Y @ X)
    cond = float(np.linalg.cond(U))
    if not cond < _COND_FAIL:
        raise NumericalError(
            f"controller recovery is singular (cond(I - YX) = {cond:.3e})"
        )
    if cond > _COND_WARN:
        _log.warning(f"controller recovery is ill-conditioned (cond {cond:.3e})")
    U_inv = la.inv(U)
    K = M @ U_inv
    L = V_inv @ F
    A_c = V_inv @ (S - Y @ A @ X - F @ C @ X - Y @ B @ M) @ U_inv
    return A_c, K, L


# D-K ITERATION


@dataclass(frozen=True)
class DkConfig:
    tol: float = 1e-3
    max_iters: int = 30


def dk_iterate(
    model_hat: OpenLoopLfr,
    channel: Optional[UncertaintyChannel],
    perf: PerformanceSpec,
    Q: np.ndarray,
    R: np.ndarray,
    config: Optional[DkConfig] = None,
) -> RobustController:
    """Alternate D- and K-steps from the nominal LQG controller.

    Only controllers certified by a D-step are accepted, so the returned
    bound is a genuine certificate and the bound sequence is non-increasing.
    """
    config = config or DkConfig()
    kind = "none" if channel is None else channel.kind
    ctrl = nominal_lqg(model_hat, Q, R, perf)

    def close(K: np.ndarray, L: np.ndarray, A_c: np.ndarray) -> ClosedLoopLfr:
        return build_closed_lfr(
            model_hat, K, L, A_c, Q, R, perf.C_eps, perf.D_eps
        )

    try:
        best_d = d_step(close(ctrl.K, ctrl.L, ctrl.A_c), channel)
    except SolverError as e:
        raise SolverError(
            f"{e}; the nominal LQG initialization is not certified, collect more data or lower delta",
            e.status,
        ) from None
    best = (ctrl.A_c, ctrl.K, ctrl.L)
    trace = [best_d.gamma]
    _log.debug(f"D-K iteration 0: gamma {best_d.gamma:.6g}")

    for it in range(1, config.max_iters + 1):
        try:
            k = k_step(model_hat, channel, best_d.Lambda, perf, Q, R)
            A_c, K, L = recover_controller(k.X, k.Y, k.M, k.F, k.S, model_hat)
            d = d_step(close(K, L, A_c), channel)
        except (SolverError, NumericalError) as e:
            _log.warning(f"D-K iteration {it} failed ({e}); keeping the best controller")
            break
        gamma_prev = trace[-1]
        if d.gamma > gamma_prev * (1.0 + 1e-6):
            _log.debug(
                f"D-K iteration {it}: gamma {d.gamma:.6g} not accepted"
            )
            break
        best, best_d = (A_c, K, L), d
        trace.append(d.gamma)
        _log.debug(f"D-K iteration {it}: gamma {d.gamma:.6g}")
        if (gamma_prev - d.gamma) < config.tol * gamma_prev:
            break

    A_c, K, L = best
    _log.info(f"robust controller synthesized, certified H2 bound {trace[-1]:.6g}")
    return RobustController(
        A_c=A_c,
        K=K,
        L=L,
        gamma=trace[-1],
        Lambda=best_d.Lambda,
        X_cal=best_d.X_cal,
        certified=True,
        multiplier=kind,
        gamma_trace=trace,
    )


def closed_loop_of(
    controller: RobustController,
    model_hat: OpenLoopLfr,
    Q: np.ndarray,
    R: np.ndarray,
    perf: PerformanceSpec,
) -> ClosedLoopLfr:
    return build_closed_lfr(
        model_hat,
        controller.K,
        controller.L,
        controller.A_c,
        Q,
        R,
        perf.C_eps,
        perf.D_eps,
    )


@dataclass(frozen=True)
class VerificationReport:
    samples: int
    max_spectral_radius: float
    max_h2: float
    gamma: float

    @property
    def ok(self) -> bool:
        return self.max_spectral_radius < 1.0 and self.max_h2 <= self.gamma + 1e-6


def verify_controller(
    controller: RobustController,
    model_hat: OpenLoopLfr,
    clfr: ClosedLoopLfr,
    ellipsoid: UncertaintyEllipsoid,
    rng: np.random.Generator,
    n_samples: int = 200,
    boundary_fraction: float = 0.5,
) -> VerificationReport:
    """Check stability and the H2 bound on sampled parameters (half on the boundary)."""
    n_boundary = int(round(boundary_fraction * n_samples))
    samples = np.vstack(
        [
            ellipsoid.sample(n_boundary, rng, boundary=True),
            ellipsoid.sample(n_samples - n_boundary, rng),
        ]
    )

    def check(vartheta: np.ndarray) -> Tuple[float, float]:
        A_cal, _ = uncertain_closed_loop(clfr, model_hat, vartheta)
        return spectral_radius(A_cal), closed_loop_h2(
            A_cal, clfr.B_d, clfr.C_eps
        )

    results = parallel_map(check, list(samples))
    radii = [r for r, _ in results] or [0.0]
    norms = [h for _, h in results] or [0.0]
    report = VerificationReport(
        samples=n_samples,
        max_spectral_radius=float(max(radii)),
        max_h2=float(max(norms)),
        gamma=controller.gamma,
    )
    if not report.ok:
        _log.warning(
            f"sampled verification failed: max spectral radius {report.max_spectral_radius:.4f}, max H2 {report.max_h2:.6g} > {controller.gamma:.6g}"
        )
    return report

