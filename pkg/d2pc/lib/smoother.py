# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Kalman filter and Rauch-Tung-Striebel smoother.

The filter gives the exact log-likelihood through the prediction-error
decomposition; the smoother gives the averaged second moments that the
E-step of the identification needs.

Time indexing: `x[0]` has the prior N(x0_mean, x0_cov) and no measurement;
`y[t]` measures `x[t]` for t = 1..T; `u[t]` drives `x[t] -> x[t+1]` for
t = 0..T-1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Tuple

import numpy as np
from scipy import linalg as la

from d2pc.lib.common import sym
from d2pc.lib.model import StructuredModel, ThetaEstimate
from d2pc.lib.validation import (
    ModelValidationError,
    NumericalError,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_LOG_2PI: Final = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class IoData:
    """Input-output trajectory: rows of `Y` are y_1..y_T, rows of `U` are u_0..u_{T-1}."""

    Y: np.ndarray
    U: np.ndarray

    def __post_init__(self) -> None:
        Y = np.asarray(self.Y, float)
        U = np.asarray(self.U, float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if U.ndim == 1:
            U = U[:, None]
        if Y.shape[0] != U.shape[0] or Y.shape[0] < 1:
            raise ModelValidationError(
                f"data needs len(Y) = len(U) >= 1, got {Y.shape[0]} and {U.shape[0]}"
            )
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "U", U)

    @property
    def T(self) -> int:
        return int(self.Y.shape[0])

    def check_against(self, model: StructuredModel) -> None:
        check_shape("Y", self.Y, (None, model.n_y))
        check_shape("U", self.U, (None, model.n_u))


@dataclass(frozen=True, eq=False)
class FilteredMoments:
    """Predicted and filtered moments for t = 0..T (index 0 is the prior)."""

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    innovations: np.ndarray


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Averaged conditional second moments given the whole trajectory."""

    Phi_plus: np.ndarray
    Psi_plus_phi: np.ndarray
    Sigma_phi: np.ndarray
    Phi_y: np.ndarray
    Psi_xy: np.ndarray
    Sigma_x: np.ndarray
    x0_smoothed_mean: np.ndarray
    x0_smoothed_cov: np.ndarray
    T: int

    def check(self, tol: float = 1e-8) -> None:
        """Raise `NumericalError` unless both stacked moment matrices are PSD."""
        stacks = (
            (
                "transition",
                np.block(
                    [
                        [self.Phi_plus, self.Psi_plus_phi],
                        [self.Psi_plus_phi.T, self.Sigma_phi],
                    ]
                ),
            ),
            (
                "measurement",
                np.block(
                    [[self.Phi_y, self.Psi_xy], [self.Psi_xy.T, self.Sigma_x]]
                ),
            ),
        )
        for label, M in stacks:
            scale = max(1.0, float(np.abs(M).max()))
            lowest = float(la.eigvalsh(sym(M)).min())
            if lowest < -tol * scale:
                raise NumericalError(
                    f"{label} moment matrix is not positive semidefinite (min eigenvalue {lowest:.3e})"
                )


def _kalman_filter(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> Tuple[float, FilteredMoments]:
    data.check_against(model)
    A, B, C = theta.A, theta.B, model.C
    EQE = sym(model.E @ theta.Q @ model.E.T)
    R = theta.R
    T, n_x, n_y = data.T, model.n_x, model.n_y
    I = np.eye(n_x)

    x_pred = np.empty((T + 1, n_x))
    P_pred = np.empty((T + 1, n_x, n_x))
    x_filt = np.empty((T + 1, n_x))
    P_filt = np.empty((T + 1, n_x, n_x))
    innovations = np.empty((T, n_y))
    x_pred[0] = x_filt[0] = theta.x0_mean
    P_pred[0] = P_filt[0] = sym(theta.x0_cov)

    loglik = 0.0
    for t in range(1, T + 1):
        x_pred[t] = A @ x_filt[t - 1] + B @ data.U[t - 1]
        P_pred[t] = sym(A @ P_filt[t - 1] @ A.T + EQE)
        S = sym(C @ P_pred[t] @ C.T + R)
        try:
            S_chol = la.cho_factor(S, lower=True)
        except la.LinAlgError:
            raise NumericalError(
                f"innovation covariance is singular at t={t}"
            ) from None
        e = data.Y[t - 1] - C @ x_pred[t]
        innovations[t - 1] = e
        logdet = 2.0 * float(np.log(np.diag(S_chol[0])).sum())
        loglik -= 0.5 * (
            n_y * _LOG_2PI + logdet + float(e @ la.cho_solve(S_chol, e))
        )
        K = la.cho_solve(S_chol, C @ P_pred[t]).T
        x_filt[t] = x_pred[t] + K @ e
        IKC = I - K @ C
        # Joseph form.
        P_filt[t] = sym(IKC @ P_pred[t] @ IKC.T + K @ R @ K.T)

    return loglik, FilteredMoments(x_pred, P_pred, x_filt, P_filt, innovations)


def kalman_loglik(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> Tuple[float, FilteredMoments]:
    """Return the exact log-likelihood of `data` under `theta` and the filtered moments."""
    return _kalman_filter(model, theta, data)


def _smoother_gain(P_filt: np.ndarray, A: np.ndarray, P_next: np.ndarray) -> np.ndarray:
    rhs = A @ P_filt
    try:
        return la.solve(P_next, rhs, assume_a="pos").T
    except (la.LinAlgError, ValueError):
        # Singular prediction covariance, e.g. from a singular A.
        return np.linalg.lstsq(P_next, rhs, rcond=None)[0].T


def _rts(
    moments: FilteredMoments, A: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = moments.innovations.shape[0]
    xs = moments.x_filt.copy()
    Ps = moments.P_filt.copy()
    # cross[t] = Cov(x[t+1], x[t] | Y).
    cross = np.empty((T,) + A.shape)
    for t in range(T - 1, -1, -1):
        G = _smoother_gain(moments.P_filt[t], A, moments.P_pred[t + 1])
        xs[t] = moments.x_filt[t] + G @ (xs[t + 1] - moments.x_pred[t + 1])
        Ps[t] = sym(
            moments.P_filt[t] + G @ (Ps[t + 1] - moments.P_pred[t + 1]) @ G.T
        )
        cross[t] = Ps[t + 1] @ G.T
    return xs, Ps, cross


def smooth(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> Tuple[SufficientStats, float]:
    """Return the sufficient statistics and the log-likelihood in one pass."""
    loglik, moments = _kalman_filter(model, theta, data)
    T = data.T
    xs, Ps, cross = _rts(moments, theta.A)

    U, Y = data.U, data.Y
    Ep = model.E_pinv
    head, tail = xs[:-1], xs[1:]
    sum_next = Ps[1:].sum(axis=0) + tail.T @ tail
    sum_cross = cross.sum(axis=0) + tail.T @ head
    sum_curr = Ps[:-1].sum(axis=0) + head.T @ head

    Phi_plus = sym(Ep @ sum_next @ Ep.T) / T
    Psi_plus_phi = Ep @ np.hstack([sum_cross, tail.T @ U]) / T
    Sigma_phi = (
        sym(
            np.block(
                [[sum_curr, head.T @ U], [U.T @ head, U.T @ U]],
            )
        )
        / T
    )
    stats = SufficientStats(
        Phi_plus=Phi_plus,
        Psi_plus_phi=Psi_plus_phi,
        Sigma_phi=Sigma_phi,
        Phi_y=sym(Y.T @ Y) / T,
        Psi_xy=Y.T @ tail / T,
        Sigma_x=sym(sum_next) / T,
        x0_smoothed_mean=xs[0].copy(),
        x0_smoothed_cov=Ps[0].copy(),
        T=T,
    )
    stats.check()
    return stats, loglik


def rts_smooth(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> SufficientStats:
    """Return the averaged smoothed second moments of `data` under `theta`."""
    return smooth(model, theta, data)[0]


def smoothed_states(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> Tuple[np.ndarray, np.ndarray]:
    """Return smoothed means (T+1, n_x) and covariances (T+1, n_x, n_x)."""
    _, moments = _kalman_filter(model, theta, data)
    xs, Ps, _ = _rts(moments, theta.A)
    return xs, Ps


def one_step_prediction_error(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> float:
    """Return the mean squared one-step-ahead output prediction error."""
    _, moments = _kalman_filter(model, theta, data)
    return float(np.mean(np.sum(moments.innovations ** 2, axis=1)))
