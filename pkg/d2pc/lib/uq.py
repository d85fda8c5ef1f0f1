# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Parametric uncertainty from the observed information matrix.

The negative Hessian of the exact log-likelihood with respect to vartheta
(covariance parameters held at their estimates) serves as an asymptotic
precision matrix.  Scaling its inverse by a chi-squared quantile gives an
ellipsoid that contains the true parameter with the requested probability.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import TYPE_CHECKING, List, Optional, Tuple, cast

import numpy as np
from scipy import linalg as la
from scipy.stats import chi2

from d2pc.lib.common import parallel_map, psd_sqrt, sym
from d2pc.lib.gem import conditional_loglik_grad
from d2pc.lib.model import StructuredModel, ThetaEstimate, encode_covariances
from d2pc.lib.smoother import IoData, kalman_loglik, smooth
from d2pc.lib.validation import (
    ModelValidationError,
    NumericalError,
    check_posdef,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

FD_SCHEMES: Final = ("loglik", "score")
_FD_STEP: Final = 1e-4


def chi2_quantile(n: int, delta: float) -> float:
    """Return the `delta` quantile of the chi-squared distribution with `n` degrees of freedom."""
    if not 0.0 < delta < 1.0:
        raise ModelValidationError(f"delta {delta} must be in (0, 1)")
    return float(chi2.ppf(delta, n))


@dataclass(frozen=True, eq=False)
class UncertaintyEllipsoid:
    """The set {v : (v - vartheta_hat)^T Sigma_vartheta_delta^-1 (v - vartheta_hat) <= 1}."""

    vartheta_hat: np.ndarray
    Sigma_vartheta: np.ndarray
    delta: float
    Sigma_vartheta_delta: np.ndarray

    def __post_init__(self) -> None:
        n = self.vartheta_hat.shape[0]
        check_shape("Sigma_vartheta", self.Sigma_vartheta, (n, n))
        check_shape("Sigma_vartheta_delta", self.Sigma_vartheta_delta, (n, n))
        check_posdef("Sigma_vartheta", self.Sigma_vartheta)
        if not 0.0 < self.delta < 1.0:
            raise ModelValidationError(f"delta {self.delta} must be in (0, 1)")

    @property
    def n_theta(self) -> int:
        return int(self.vartheta_hat.shape[0])

    @cached_property
    def sqrt(self) -> np.ndarray:
        """Symmetric square root of `Sigma_vartheta_delta`."""
        return psd_sqrt(self.Sigma_vartheta_delta)

    @cached_property
    def _chol(self) -> np.ndarray:
        return cast(
            np.ndarray, la.cholesky(sym(self.Sigma_vartheta_delta), lower=True)
        )

    def quad_form(self, vartheta: np.ndarray) -> float:
        d = np.asarray(vartheta, float) - self.vartheta_hat
        z = la.solve_triangular(self._chol, d, lower=True)
        return float(z @ z)

    def contains(self, vartheta: np.ndarray, tol: float = 0.0) -> bool:
        return self.quad_form(vartheta) <= 1.0 + tol

    def sample(
        self,
        n: int,
        rng: np.random.Generator,
        boundary: bool = False,
    ) -> np.ndarray:
        """Draw `n` points uniformly from the ellipsoid (or from its boundary)."""
        z = rng.standard_normal((n, self.n_theta))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        if not boundary:
            z *= rng.uniform(size=(n, 1)) ** (1.0 / self.n_theta)
        return cast(np.ndarray, self.vartheta_hat + z @ self._chol.T)

    def scaled(self, delta: float) -> UncertaintyEllipsoid:
        """Return the ellipsoid with the same center and shape at level `delta`."""
        return replace(
            self,
            delta=delta,
            Sigma_vartheta_delta=chi2_quantile(self.n_theta, delta)
            * self.Sigma_vartheta,
        )


def confidence_ellipsoid(
    vartheta_hat: np.ndarray, H: np.ndarray, delta: float
) -> UncertaintyEllipsoid:
    """Return the level-`delta` ellipsoid for precision matrix `H` around `vartheta_hat`."""
    vartheta_hat = np.asarray(vartheta_hat, float).reshape(-1)
    n = vartheta_hat.shape[0]
    check_shape("H", H, (n, n))
    quantile = chi2_quantile(n, delta)
    try:
        H_chol = la.cho_factor(sym(H), lower=True)
    except la.LinAlgError:
        raise ModelValidationError(
            "information matrix must be positive definite"
        ) from None
    Sigma = sym(la.cho_solve(H_chol, np.eye(n)))
    return UncertaintyEllipsoid(
        vartheta_hat=vartheta_hat,
        Sigma_vartheta=Sigma,
        delta=delta,
        Sigma_vartheta_delta=quantile * Sigma,
    )


def _at(
    model: StructuredModel, theta: ThetaEstimate, vartheta: np.ndarray
) -> ThetaEstimate:
    return ThetaEstimate.from_vectors(model, vartheta, theta.eta, check=False)


def score(
    model: StructuredModel, theta: ThetaEstimate, data: IoData
) -> np.ndarray:
    """Return the gradient of the log-likelihood with respect to vartheta.

    By Fisher's identity this equals the gradient of the (unnormalized)
    conditional log-likelihood at statistics smoothed under `theta` itself.
    """
    stats, _ = smooth(model, theta, data)
    return stats.T * conditional_loglik_grad(theta, stats, model)


def _steps(vartheta: np.ndarray, step: float) -> np.ndarray:
    return cast(np.ndarray, step * np.maximum(1.0, np.abs(vartheta)))


def _hessian_from_loglik(
    model: StructuredModel,
    theta: ThetaEstimate,
    data: IoData,
    step: float,
    threads: Optional[int],
) -> np.ndarray:
    v0 = theta.vartheta
    n = v0.shape[0]
    h = _steps(v0, step)
    pairs = [(i, j) for i in range(n) for j in range(i + 1)]

    def loglik(v: np.ndarray) -> float:
        return kalman_loglik(model, _at(model, theta, v), data)[0]

    def entry(pair: Tuple[int, int]) -> float:
        i, j = pair
        ei = np.zeros(n)
        ej = np.zeros(n)
        ei[i] = h[i]
        ej[j] = h[j]
        total = (
            loglik(v0 + ei + ej)
            - loglik(v0 + ei - ej)
            - loglik(v0 - ei + ej)
            + loglik(v0 - ei - ej)
        )
        return total / (4.0 * h[i] * h[j])

    H = np.zeros((n, n))
    for (i, j), value in zip(pairs, parallel_map(entry, pairs, threads)):
        H[i, j] = H[j, i] = value
    return H


def _hessian_from_score(
    model: StructuredModel,
    theta: ThetaEstimate,
    data: IoData,
    step: float,
    threads: Optional[int],
) -> np.ndarray:
    v0 = theta.vartheta
    n = v0.shape[0]
    h = _steps(v0, step)

    def column(j: int) -> np.ndarray:
        e = np.zeros(n)
        e[j] = h[j]
        up = score(model, _at(model, theta, v0 + e), data)
        down = score(model, _at(model, theta, v0 - e), data)
        return cast(np.ndarray, (up - down) / (2.0 * h[j]))

    columns: List[np.ndarray] = parallel_map(column, range(n), threads)
    return sym(np.column_stack(columns))


def observed_information(
    model: StructuredModel,
    theta_hat: ThetaEstimate,
    data: IoData,
    scheme: str = "loglik",
    step: float = _FD_STEP,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Return the negative Hessian of the log-likelihood in vartheta at `theta_hat`.

    `scheme="loglik"` takes central second differences of the exact filter
    log-likelihood; `scheme="score"` takes central differences of `score`.
    Raises `NumericalError` if the result is not positive definite.
    """
    if scheme not in FD_SCHEMES:
        raise ModelValidationError(
            f"scheme '{scheme}' must be one of the following: {', '.join(FD_SCHEMES)}"
        )
    data.check_against(model)
    if scheme == "loglik":
        H = _hessian_from_loglik(model, theta_hat, data, step, threads)
    else:
        H = _hessian_from_score(model, theta_hat, data, step, threads)
    info = sym(-H)
    lowest = float(la.eigvalsh(info).min())
    if not lowest > 0.0:
        raise NumericalError(
            f"parameters not identifiable from this data (min information eigenvalue {lowest:.3e})"
        )
    _log.debug(f"observed information ready, min eigenvalue {lowest:.3e}")
    return info


def inflate_covariances(
    model: StructuredModel, theta: ThetaEstimate, factor: float
) -> ThetaEstimate:
    """Return `theta` with Q and R scaled by `factor` >= 1."""
    if not factor >= 1.0:
        raise ModelValidationError(
            f"inflation factor {factor} must be at least 1"
        )
    eta = encode_covariances(
        model, factor * theta.Q, factor * theta.R, theta.x0_mean, theta.x0_cov
    )
    return ThetaEstimate.from_vectors(model, theta.vartheta, eta)
