# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Linear fractional representation of the uncertain open and closed loop.

For vartheta = vartheta_hat + vartheta_tilde the dynamics factor as

    [A, B] = [A_hat, B_hat] + E Delta J_Delta,   Delta = I kron vartheta_tilde^T

so the uncertainty enters through the channel p = Delta q with q = J_Delta z,
z = [x; u].  An `UncertaintyChannel` packages the multipliers that certify
robust conditions over the whole confidence ellipsoid, either with the
full-block multiplier set or with a scalar over-approximation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple, Union, cast

import cvxpy as cp
import numpy as np
from scipy import linalg as la

from d2pc.lib.common import blkdiag, commutation, psd_sqrt, sym, vec
from d2pc.lib.conic import ConicProblem, Operand, block, kron
from d2pc.lib.model import StructuredModel, assemble_dynamics
from d2pc.lib.uq import UncertaintyEllipsoid
from d2pc.lib.validation import (
    ModelValidationError,
    check_posdef,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

CHANNEL_KINDS: Final = ("full", "scalar")
DEFAULT_MARGIN: Final = 1e-8


def delta_matrix(n_w: int, vartheta_tilde: np.ndarray) -> np.ndarray:
    """Return Delta = I_{n_w} kron vartheta_tilde^T."""
    return np.kron(np.eye(n_w), np.asarray(vartheta_tilde, float)[None, :])


@dataclass(frozen=True, eq=False)
class OpenLoopLfr:
    A_hat: np.ndarray
    B_hat: np.ndarray
    J_Delta: np.ndarray
    E: np.ndarray
    C: np.ndarray
    J: np.ndarray
    vartheta_hat: np.ndarray

    @property
    def n_x(self) -> int:
        return int(self.A_hat.shape[0])

    @property
    def n_w(self) -> int:
        return int(self.E.shape[1])

    def dynamics(self, vartheta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (A, B) at `vartheta` through the fractional representation."""
        Delta = delta_matrix(self.n_w, vartheta - self.vartheta_hat)
        AB = self.E @ Delta @ self.J_Delta
        return self.A_hat + AB[:, : self.n_x], self.B_hat + AB[:, self.n_x :]


def build_open_lfr(
    model: StructuredModel, ellipsoid: UncertaintyEllipsoid
) -> OpenLoopLfr:
    """Return the open-loop representation around the ellipsoid center."""
    check_shape("vartheta_hat", ellipsoid.vartheta_hat, (model.n_theta,))
    A_hat, B_hat = assemble_dynamics(model, ellipsoid.vartheta_hat)
    n_w, m = model.n_w, model.n_x + model.n_u
    PJ = commutation(n_w, m) @ model.J
    J_Delta = np.kron(np.eye(n_w), PJ.T) @ np.kron(
        vec(np.eye(n_w))[:, None], np.eye(m)
    )
    return OpenLoopLfr(
        A_hat=A_hat,
        B_hat=B_hat,
        J_Delta=J_Delta,
        E=model.E,
        C=model.C,
        J=model.J,
        vartheta_hat=ellipsoid.vartheta_hat.copy(),
    )


@dataclass(frozen=True, eq=False)
class ClosedLoopLfr:
    """Plant in feedback with u = K x_c + nu, x_c+ = A_c x_c + L y.

    The closed-loop state is xi = [x; x_c] and the disturbance d stacks the
    normalized process and measurement noise.
    """

    A_cal_hat: np.ndarray
    B_p: np.ndarray
    B_d: np.ndarray
    C_q: np.ndarray
    C_eps: np.ndarray
    B_nu_hat: np.ndarray
    K: np.ndarray
    L: np.ndarray
    A_c: np.ndarray

    @property
    def n_xi(self) -> int:
        return int(self.A_cal_hat.shape[0])

    @property
    def G(self) -> np.ndarray:
        """Map xi -> z = [x; K x_c]."""
        n_x = self.K.shape[1]
        return blkdiag(np.eye(n_x), self.K)


def build_closed_lfr(
    open_lfr: OpenLoopLfr,
    K: np.ndarray,
    L: np.ndarray,
    A_c: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    C_eps: np.ndarray,
    D_eps: np.ndarray,
) -> ClosedLoopLfr:
    """Close the loop around the estimated plant with a dynamic output-feedback controller."""
    n_x, n_u = open_lfr.B_hat.shape
    n_y = open_lfr.C.shape[0]
    check_shape("K", K, (n_u, n_x))
    check_shape("L", L, (n_x, n_y))
    check_shape("A_c", A_c, (n_x, n_x))
    A, B, C, E = open_lfr.A_hat, open_lfr.B_hat, open_lfr.C, open_lfr.E
    A_cal = np.block([[A, B @ K], [L @ C, A_c]])
    B_d = blkdiag(E @ psd_sqrt(Q), L @ psd_sqrt(R))
    B_p = np.vstack([E, np.zeros((n_x, E.shape[1]))])
    G = blkdiag(np.eye(n_x), K)
    return ClosedLoopLfr(
        A_cal_hat=A_cal,
        B_p=B_p,
        B_d=B_d,
        C_q=open_lfr.J_Delta @ G,
        C_eps=np.hstack([C_eps, D_eps @ K]),
        B_nu_hat=np.vstack([B, np.zeros((n_x, n_u))]),
        K=K,
        L=L,
        A_c=A_c,
    )


def uncertain_closed_loop(
    clfr: ClosedLoopLfr, open_lfr: OpenLoopLfr, vartheta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return the closed-loop (A_cal, B_nu) at a concrete `vartheta`."""
    V = delta_matrix(open_lfr.n_w, vartheta - open_lfr.vartheta_hat) @ (
        open_lfr.J_Delta
    )
    n_x = open_lfr.n_x
    A_cal = clfr.A_cal_hat + clfr.B_p @ V @ clfr.G
    B_nu = clfr.B_nu_hat + clfr.B_p @ V[:, n_x:]
    return A_cal, B_nu


# MULTIPLIERS


def multiplier_feasibility(
    Delta: np.ndarray,
    ellipsoid: UncertaintyEllipsoid,
    Lambda: np.ndarray,
    lift: Optional[np.ndarray] = None,
) -> float:
    """Return the minimum eigenvalue of Lambda - Delta (Lambda kron Sigma^-1) Delta^T.

    The value is non-negative exactly when the multiplier certifies `Delta`.
    With `lift=M` (full column rank), the certificate of the lifted set
    M Delta is evaluated on the range of M.
    """
    n_w = Lambda.shape[0]
    check_shape("Delta", Delta, (n_w, n_w * ellipsoid.n_theta))
    check_posdef("Lambda", sym(Lambda), semi=True)
    Sigma_inv = la.inv(ellipsoid.Sigma_vartheta_delta)
    form = sym(Lambda - Delta @ np.kron(Lambda, Sigma_inv) @ Delta.T)
    if lift is None:
        return float(la.eigvalsh(form).min())
    if np.linalg.matrix_rank(lift) < lift.shape[1]:
        raise ModelValidationError("lift must have full column rank")
    basis = la.orth(lift)
    lifted = lift @ form @ lift.T
    return float(la.eigvalsh(sym(basis.T @ lifted @ basis)).min())


@dataclass(frozen=True, eq=False)
class OverapproxSet:
    """Matrices Delta_bar with Delta_bar D Delta_bar^T <= bound * I."""

    D: np.ndarray
    bound: float

    def __post_init__(self) -> None:
        check_posdef("D", self.D)
        if not self.bound > 0.0:
            raise ModelValidationError("over-approximation bound must be positive")


def optimize_overapprox_D(
    ellipsoid: UncertaintyEllipsoid, J: np.ndarray, n_w: int
) -> OverapproxSet:
    """Find the weight D whose over-approximating set is smallest.

    Minimizes t subject to I <= M <= t I with
    M = S J^T (D kron I_{n_w}) J S and S = Sigma_vartheta_delta^(1/2).
    """
    if J.shape[0] % n_w:
        raise ModelValidationError(
            f"J has {J.shape[0]} rows, not a multiple of n_w = {n_w}"
        )
    m = J.shape[0] // n_w
    check_shape("J", J, (None, ellipsoid.n_theta))
    S = ellipsoid.sqrt
    n = ellipsoid.n_theta

    prob = ConicProblem("overapprox_D")
    D = prob.variable("D", (m, m), symmetric=True)
    t = prob.variable("t")
    M = S @ J.T @ kron(D, np.eye(n_w)) @ J @ S
    prob.add_psd(M - np.eye(n))
    prob.add_psd(t * np.eye(n) - M)
    prob.add_psd(D, margin=DEFAULT_MARGIN)
    prob.minimize(t)
    report = prob.solve().require("over-approximation weight")

    D_val = sym(report["D"])
    M_val = S @ J.T @ np.kron(D_val, np.eye(n_w)) @ J @ S
    bound = float(la.eigvalsh(sym(M_val)).max())
    _log.debug(f"over-approximation bound {bound:.4g}")
    return OverapproxSet(D=D_val, bound=bound)


@dataclass(frozen=True, eq=False)
class UncertaintyChannel:
    """Normalized uncertainty channel q = q_map z with its multiplier family.

    For kind "full" the multiplier is Lambda >= 0 (n_w x n_w) with
    Pq = Lambda kron I and Pp = Lambda.  For kind "scalar" it is tau >= 0
    with Pq = tau D and Pp = tau * bound * I.
    """

    kind: str
    q_map: np.ndarray
    n_w: int
    n_theta: int
    overapprox: Optional[OverapproxSet] = None

    def __post_init__(self) -> None:
        if self.kind not in CHANNEL_KINDS:
            raise ModelValidationError(
                f"channel kind '{self.kind}' must be one of the following: {', '.join(CHANNEL_KINDS)}"
            )
        if self.kind == "scalar" and self.overapprox is None:
            raise ModelValidationError("a scalar channel needs an OverapproxSet")

    @classmethod
    def full_block(
        cls, open_lfr: OpenLoopLfr, ellipsoid: UncertaintyEllipsoid
    ) -> UncertaintyChannel:
        q_map = np.kron(np.eye(open_lfr.n_w), ellipsoid.sqrt) @ open_lfr.J_Delta
        return cls("full", q_map, open_lfr.n_w, ellipsoid.n_theta)

    @classmethod
    def scalar(
        cls,
        open_lfr: OpenLoopLfr,
        ellipsoid: UncertaintyEllipsoid,
        overapprox: OverapproxSet,
    ) -> UncertaintyChannel:
        m = open_lfr.J_Delta.shape[1]
        check_shape("D", overapprox.D, (m, m))
        return cls(
            "scalar", np.eye(m), open_lfr.n_w, ellipsoid.n_theta, overapprox
        )

    @property
    def n_q(self) -> int:
        return int(self.q_map.shape[0])

    def multipliers(
        self, value: Union[np.ndarray, float, cp.Expression]
    ) -> Tuple[Operand, Operand]:
        """Return (Pq, Pp) for a multiplier value or expression."""
        if self.kind == "full":
            return kron(value, np.eye(self.n_theta)), value
        overapprox = cast(OverapproxSet, self.overapprox)
        return (
            value * overapprox.D,
            value * overapprox.bound * np.eye(self.n_w),
        )

    def declare(
        self, prob: ConicProblem, name: str = "Lambda"
    ) -> Tuple[cp.Variable, Operand, Operand]:
        """Declare the multiplier in `prob`; return it with (Pq, Pp)."""
        if self.kind == "full":
            var = prob.variable(name, (self.n_w, self.n_w), symmetric=True)
            prob.add_psd(var, margin=DEFAULT_MARGIN)
        else:
            var = prob.variable(name, nonneg=True)
        Pq, Pp = self.multipliers(var)
        return var, Pq, Pp


def make_channel(
    open_lfr: OpenLoopLfr,
    ellipsoid: Optional[UncertaintyEllipsoid],
    kind: str = "full",
) -> Optional[UncertaintyChannel]:
    """Return the channel of `kind` for `ellipsoid`; None means nominal.

    Kind "none" or a missing ellipsoid ignore the parametric uncertainty.
    """
    if ellipsoid is None or kind == "none":
        return None
    if kind == "full":
        return UncertaintyChannel.full_block(open_lfr, ellipsoid)
    if kind != "scalar":
        raise ModelValidationError(
            f"channel kind '{kind}' must be one of the following: full, scalar, none"
        )
    overapprox = optimize_overapprox_D(ellipsoid, open_lfr.J, open_lfr.n_w)
    return UncertaintyChannel.scalar(open_lfr, ellipsoid, overapprox)


def _zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols))


def robust_lyapunov_lmi(
    prob: ConicProblem,
    A_hat: np.ndarray,
    B_p: np.ndarray,
    C_q: np.ndarray,
    X_now: Operand,
    X_next: Operand,
    Pq: Operand,
    Pp: Operand,
    W: Operand,
    margin: float = DEFAULT_MARGIN,
) -> None:
    """Add the condition A(Delta) X_now A(Delta)^T + W <= X_next for all Delta.

    A(Delta) = A_hat + B_p Delta C_q and the multipliers (Pq, Pp) satisfy
    Delta Pq Delta^T <= Pp over the uncertainty set.  A constant `X_now`
    gives the direct two-block form; a variable one the Schur-complement
    three-block form.
    """
    n = A_hat.shape[0]
    n_q = C_q.shape[0]
    top = -X_next + W + B_p @ Pp @ B_p.T
    if isinstance(X_now, np.ndarray):
        lmi = block(
            [
                [top + A_hat @ X_now @ A_hat.T, A_hat @ X_now @ C_q.T],
                [C_q @ X_now @ A_hat.T, C_q @ X_now @ C_q.T - Pq],
            ]
        )
        prob.add_psd(-lmi, margin=margin)
        return
    lmi = block(
        [
            [top, _zeros(n, n_q), A_hat @ X_now],
            [_zeros(n_q, n), -Pq, C_q @ X_now],
            [X_now @ A_hat.T, X_now @ C_q.T, -X_now],
        ]
    )
    prob.add_psd(-lmi, margin=margin)


def _nominal_lyapunov_lmi(
    prob: ConicProblem,
    A_hat: np.ndarray,
    X_now: Operand,
    X_next: Operand,
    W: Operand,
    margin: float,
) -> None:
    if isinstance(X_now, np.ndarray):
        prob.add_psd(X_next - W - A_hat @ X_now @ A_hat.T, margin=margin)
        return
    prob.add_psd(
        block([[X_next - W, A_hat @ X_now], [X_now @ A_hat.T, X_now]]),
        margin=margin,
    )


def channel_lyapunov_lmi(
    prob: ConicProblem,
    channel: Optional[UncertaintyChannel],
    A_hat: np.ndarray,
    B_p: np.ndarray,
    G: np.ndarray,
    X_now: Operand,
    X_next: Operand,
    W: Operand,
    name: str = "Lambda",
    margin: float = DEFAULT_MARGIN,
) -> Optional[cp.Variable]:
    """Add the robust Lyapunov condition for closed-loop states mapped to z by `G`.

    Declares a fresh multiplier called `name` and returns it; `channel=None`
    poses the nominal condition and returns None.
    """
    if channel is None:
        _nominal_lyapunov_lmi(prob, A_hat, X_now, X_next, W, margin)
        return None
    var, Pq, Pp = channel.declare(prob, name)
    robust_lyapunov_lmi(
        prob, A_hat, B_p, channel.q_map @ G, X_now, X_next, Pq, Pp, W, margin
    )
    return var
