# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Generalized expectation-maximization for structured state-space models.

Each iteration smooths the data under the current estimate (E-step) and then
picks any new estimate that does not decrease the conditional log-likelihood
(GM-step).  The GM-step splits the process-noise blocks into groups that share
dynamics parameters and solves each group by weighted least squares, by a
closed form, or by L-BFGS-B, whichever the group's structure admits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, cast

import numpy as np
from scipy import linalg as la
from scipy.optimize import minimize

from d2pc.lib.common import clip_eigenvalues, sym, vec
from d2pc.lib.model import (
    CovBlockSpec,
    StructuredModel,
    ThetaEstimate,
    encode_covariances,
    gamma_matrix,
    project_to_box,
    unvech,
    vech,
)
from d2pc.lib.smoother import IoData, SufficientStats, smooth
from d2pc.lib.validation import (
    ModelValidationError,
    NumericalError,
)

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

_ACTIVE_TOL: Final = 1e-12
_MONOTONE_SLACK: Final = 1e-8


@dataclass(frozen=True)
class GemConfig:
    """Stopping rule and inner-optimizer settings.

    `epsilon=None` stops once the log-likelihood gains less than
    1e-6 * |loglik| in an iteration.
    """

    epsilon: Optional[float] = None
    max_iters: int = 500
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 100

    def __post_init__(self) -> None:
        if self.epsilon is not None and not self.epsilon >= 0.0:
            raise ModelValidationError("`epsilon` must not be negative")
        if self.max_iters < 1 or self.lbfgs_memory < 1:
            raise ModelValidationError(
                "`max_iters` and `lbfgs_memory` must be positive"
            )


@dataclass
class GemTrace:
    logliks: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    fallbacks: int = 0

    def is_monotone(self, tol: float = _MONOTONE_SLACK) -> bool:
        """Return whether the log-likelihood never decreased by more than `tol` (relative)."""
        return all(
            b >= a - tol * max(1.0, abs(a))
            for a, b in zip(self.logliks, self.logliks[1:])
        )


# CONDITIONAL LOG-LIKELIHOOD


def _chol(label: str, M: np.ndarray) -> Tuple[np.ndarray, bool]:
    try:
        return la.cho_factor(sym(M), lower=True)
    except la.LinAlgError:
        raise NumericalError(f"`{label}` is not positive definite") from None


def _logdet(chol: Tuple[np.ndarray, bool]) -> float:
    return 2.0 * float(np.log(np.diag(chol[0])).sum())


def _gamma(model: StructuredModel, theta: ThetaEstimate) -> np.ndarray:
    return cast(np.ndarray, model.E_pinv @ np.hstack([theta.A, theta.B]))


def _transition_residual(stats: SufficientStats, G: np.ndarray) -> np.ndarray:
    Psi = stats.Psi_plus_phi
    return sym(
        stats.Phi_plus - Psi @ G.T - G @ Psi.T + G @ stats.Sigma_phi @ G.T
    )


def _measurement_residual(
    stats: SufficientStats, C: np.ndarray
) -> np.ndarray:
    Psi = stats.Psi_xy
    return sym(stats.Phi_y - Psi @ C.T - C @ Psi.T + C @ stats.Sigma_x @ C.T)


def conditional_loglik(
    theta: ThetaEstimate, stats: SufficientStats, model: StructuredModel
) -> float:
    """Return the per-sample conditional log-likelihood Q(theta, theta') up to a constant.

    `stats` come from smoothing under theta'.  The value is the expected
    complete-data log-likelihood divided by T.
    """
    T = stats.T
    Q_chol = _chol("Q", theta.Q)
    R_chol = _chol("R", theta.R)
    P0_chol = _chol("x0_cov", theta.x0_cov)

    d0 = stats.x0_smoothed_mean - theta.x0_mean
    X0 = stats.x0_smoothed_cov + np.outer(d0, d0)
    S_plus = _transition_residual(stats, _gamma(model, theta))
    S_y = _measurement_residual(stats, model.C)

    minus_two_q = (
        np.trace(la.cho_solve(P0_chol, X0)) / T
        + _logdet(P0_chol) / T
        + _logdet(Q_chol)
        + _logdet(R_chol)
        + np.trace(la.cho_solve(Q_chol, S_plus))
        + np.trace(la.cho_solve(R_chol, S_y))
    )
    return -0.5 * float(minus_two_q)


def conditional_loglik_grad(
    theta: ThetaEstimate, stats: SufficientStats, model: StructuredModel
) -> np.ndarray:
    """Return the gradient of `conditional_loglik` with respect to vartheta."""
    G = _gamma(model, theta)
    Qinv_resid = la.solve(
        theta.Q, stats.Psi_plus_phi - G @ stats.Sigma_phi, assume_a="pos"
    )
    return cast(np.ndarray, model.J.T @ vec(Qinv_resid))


# M-STEP


def _is_unstructured(model: StructuredModel) -> bool:
    def single_full(blocks: Sequence[CovBlockSpec]) -> bool:
        return len(blocks) == 1 and blocks[0].kind == "full"

    n = model.J.shape[0]
    return (
        model.J.shape == (n, n)
        and np.allclose(model.J, np.eye(n))
        and not np.any(model.vartheta0)
        and single_full(model.q_blocks)
        and single_full(model.r_blocks)
    )


def _initial_state_update(
    model: StructuredModel, stats: SufficientStats
) -> Tuple[np.ndarray, np.ndarray]:
    low, high = model.cov_eig_bounds
    x0_mean = np.clip(stats.x0_smoothed_mean, -model.x0_box, model.x0_box)
    return x0_mean, clip_eigenvalues(stats.x0_smoothed_cov, low, high)


def m_step_closed_form(
    stats: SufficientStats, model: StructuredModel
) -> ThetaEstimate:
    """Return the global maximizer of Q for an unstructured model.

    With C known, the measurement covariance maximizer is the averaged
    measurement residual.  The result is projected into the admissible set.
    """
    if not _is_unstructured(model):
        raise ModelValidationError(
            "the closed-form M-step needs J = I, vartheta0 = 0 and fully parameterized Q and R"
        )
    for label, M in (("Sigma_phi", stats.Sigma_phi), ("Sigma_x", stats.Sigma_x)):
        try:
            la.cho_factor(M, lower=True)
        except la.LinAlgError:
            raise NumericalError(f"`{label}` is singular") from None

    low, high = model.cov_eig_bounds
    G = la.solve(stats.Sigma_phi, stats.Psi_plus_phi.T, assume_a="pos").T
    vartheta = project_to_box(model, vec(G - model.gamma_offset))
    G = gamma_matrix(model, vartheta)
    Q = clip_eigenvalues(_transition_residual(stats, G), low, high)
    R = clip_eigenvalues(_measurement_residual(stats, model.C), low, high)
    x0_mean, x0_cov = _initial_state_update(model, stats)
    return ThetaEstimate.from_matrices(model, vartheta, Q, R, x0_mean, x0_cov)


# GM-STEP


@dataclass(frozen=True)
class _Group:
    blocks: Tuple[int, ...]
    params: np.ndarray


def _projector_groups(model: StructuredModel) -> List[_Group]:
    """Group Q blocks that share dynamics parameters."""
    m = model.n_x + model.n_u
    scale = max(1.0, float(np.abs(model.J).max()))
    active = [
        np.abs(np.kron(np.eye(m), block.projector) @ model.J).max(axis=0)
        > _ACTIVE_TOL * scale
        for block in model.q_blocks
    ]
    parent = list(range(len(active)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(active)):
        for j in range(i):
            if np.any(active[i] & active[j]):
                parent[find(i)] = find(j)

    members: Dict[int, List[int]] = {}
    for i in range(len(active)):
        members.setdefault(find(i), []).append(i)
    groups = []
    for blocks in members.values():
        mask = np.zeros(model.n_theta, dtype=bool)
        for i in blocks:
            mask |= active[i]
        groups.append(_Group(tuple(blocks), np.flatnonzero(mask)))
    return groups


def _fixed_part(
    model: StructuredModel, vartheta: np.ndarray, idx: np.ndarray
) -> np.ndarray:
    rest = np.ones(model.n_theta, dtype=bool)
    rest[idx] = False
    return (
        vec(model.gamma_offset)
        + model.vartheta0
        + model.J[:, rest] @ vartheta[rest]
    )


def _weighted_least_squares(
    model: StructuredModel,
    stats: SufficientStats,
    vartheta: np.ndarray,
    idx: np.ndarray,
    W: np.ndarray,
) -> np.ndarray:
    """Minimize tr(W S(Gamma)) over vartheta[idx] by the normal equations."""
    K = np.kron(stats.Sigma_phi, W)
    Jg = model.J[:, idx]
    lhs = sym(Jg.T @ K @ Jg)
    rhs = Jg.T @ (
        vec(W @ stats.Psi_plus_phi) - K @ _fixed_part(model, vartheta, idx)
    )
    try:
        return cast(np.ndarray, la.solve(lhs, rhs, assume_a="pos"))
    except (la.LinAlgError, ValueError):
        return cast(np.ndarray, np.linalg.lstsq(lhs, rhs, rcond=None)[0])


def _scale_bounds(
    block: CovBlockSpec, low: float, high: float
) -> Tuple[float, float]:
    w = la.eigvalsh(cast(np.ndarray, block.base))
    lo, hi = low / w.min(), high / w.max()
    if lo > hi:
        raise ModelValidationError(
            "scaled covariance base is too ill-conditioned for cov_eig_bounds"
        )
    return lo, hi


def _closed_form_block(
    block: CovBlockSpec, S_i: np.ndarray, low: float, high: float
) -> np.ndarray:
    """Return the eta slice maximizing Q for block residual `S_i`."""
    if block.kind == "fixed":
        return np.zeros(0)
    if block.kind == "scaled":
        lam = float(block.encode(S_i)[0])
        return np.array([np.clip(lam, *_scale_bounds(block, low, high))])
    return block.encode(clip_eigenvalues(S_i, low, high))


def _rows_are_free(
    model: StructuredModel, block: CovBlockSpec, idx: np.ndarray
) -> bool:
    m = model.n_x + model.n_u
    D = np.kron(np.eye(m), block.projector) @ model.J[:, idx]
    return D.shape[0] == D.shape[1] and np.linalg.matrix_rank(D) == D.shape[0]


class _GroupObjective:
    """Sum over a group's blocks of log det Q_i + tr(Q_i^-1 Pi_i S Pi_i^T).

    The decision vector stacks vartheta[idx] and, per non-fixed block, either
    log(lambda) or the Cholesky factor with log-diagonal.
    """

    def __init__(
        self,
        model: StructuredModel,
        stats: SufficientStats,
        vartheta: np.ndarray,
        group: _Group,
    ) -> None:
        self.model = model
        self.stats = stats
        self.vartheta = vartheta
        self.idx = group.params
        self.blocks = [model.q_blocks[i] for i in group.blocks]
        self.fixed = _fixed_part(model, vartheta, self.idx)
        self.sizes = [b.n_params for b in self.blocks]

    def pack(self, params: Sequence[np.ndarray]) -> np.ndarray:
        parts = [self.vartheta[self.idx]]
        for block, p in zip(self.blocks, params):
            if block.kind == "scaled":
                parts.append(np.log(p))
            elif block.kind == "full":
                z = p.copy()
                diag = np.diag_indices(block.size)
                L = unvech(z, block.size, symmetric=False)
                L[diag] = np.log(np.abs(L[diag]))
                parts.append(vech(L))
        return np.concatenate(parts)

    def unpack(self, z: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        k = self.idx.size
        theta_g = z[:k]
        mats, start = [], k
        for block, n in zip(self.blocks, self.sizes):
            chunk = z[start : start + n]
            start += n
            if block.kind == "fixed":
                mats.append(cast(np.ndarray, block.base))
            elif block.kind == "scaled":
                mats.append(np.exp(chunk[0]) * cast(np.ndarray, block.base))
            else:
                L = unvech(chunk, block.size, symmetric=False)
                diag = np.diag_indices(block.size)
                L[diag] = np.exp(L[diag])
                mats.append(L)
        return theta_g, mats

    def block_params(self, z: np.ndarray, low: float, high: float) -> List[np.ndarray]:
        _, mats = self.unpack(z)
        params = []
        for block, M in zip(self.blocks, mats):
            if block.kind == "fixed":
                params.append(np.zeros(0))
            elif block.kind == "scaled":
                lam = float(np.trace(M) / np.trace(block.base))
                params.append(
                    np.array([np.clip(lam, *_scale_bounds(block, low, high))])
                )
            else:
                Q_i = clip_eigenvalues(M @ M.T, low, high)
                params.append(block.encode(Q_i))
        return params

    def bounds(self, low: float, high: float) -> List[Tuple[Optional[float], Optional[float]]]:
        out: List[Tuple[Optional[float], Optional[float]]] = list(
            zip(self.model.lower[self.idx], self.model.upper[self.idx])
        )
        for block, n in zip(self.blocks, self.sizes):
            if block.kind == "scaled":
                lo, hi = _scale_bounds(block, low, high)
                out.append((float(np.log(lo)), float(np.log(hi))))
            else:
                out.extend([(None, None)] * n)
        return out

    def __call__(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        model, stats = self.model, self.stats
        theta_g, mats = self.unpack(z)
        g = self.fixed + model.J[:, self.idx] @ theta_g
        G = g.reshape((model.n_w, model.n_x + model.n_u), order="F")
        S = _transition_residual(stats, G)

        value = 0.0
        W = np.zeros((model.n_w, model.n_w))
        grads: List[np.ndarray] = []
        for block, M in zip(self.blocks, mats):
            Pi = block.projector
            Q_i = M @ M.T if block.kind == "full" else M
            Q_inv = la.inv(sym(Q_i))
            S_i = Pi @ S @ Pi.T
            value += float(np.linalg.slogdet(Q_i)[1] + np.trace(Q_inv @ S_i))
            W += Pi.T @ Q_inv @ Pi
            Gq = sym(Q_inv - Q_inv @ S_i @ Q_inv)
            if block.kind == "scaled":
                grads.append(np.array([float(np.trace(Gq @ Q_i))]))
            elif block.kind == "full":
                dL = 2.0 * Gq @ M
                diag = np.diag_indices(block.size)
                dL[diag] *= M[diag]
                grads.append(vech(dL))
        d_theta = model.J[:, self.idx].T @ vec(
            2.0 * W @ (G @ stats.Sigma_phi - stats.Psi_plus_phi)
        )
        return value, np.concatenate([d_theta] + grads)


def _update_group(
    model: StructuredModel,
    stats: SufficientStats,
    vartheta: np.ndarray,
    q_params: List[np.ndarray],
    group: _Group,
    config: GemConfig,
) -> None:
    """Update `vartheta` and `q_params` in place for one group."""
    low, high = model.cov_eig_bounds
    idx = group.params
    blocks = [model.q_blocks[i] for i in group.blocks]
    m = model.n_x + model.n_u

    def residual_blocks() -> None:
        G = (
            _fixed_part(model, vartheta, idx)
            + model.J[:, idx] @ vartheta[idx]
        ).reshape((model.n_w, m), order="F")
        S = _transition_residual(stats, G)
        for i, block in zip(group.blocks, blocks):
            Pi = block.projector
            q_params[i] = _closed_form_block(block, Pi @ S @ Pi.T, low, high)

    if idx.size == 0:
        residual_blocks()
        return

    all_fixed = all(b.kind == "fixed" for b in blocks)
    single = len(blocks) == 1
    analytic = all_fixed or (
        single
        and (
            blocks[0].kind == "scaled"
            or _rows_are_free(model, blocks[0], idx)
        )
    )
    if analytic:
        W = np.zeros((model.n_w, model.n_w))
        for i, block in zip(group.blocks, blocks):
            base = (
                block.base
                if block.kind != "full"
                else block.assemble(q_params[i])
            )
            W += block.projector.T @ la.inv(base) @ block.projector
        candidate = _weighted_least_squares(model, stats, vartheta, idx, W)
        if np.all(candidate >= model.lower[idx]) and np.all(
            candidate <= model.upper[idx]
        ):
            vartheta[idx] = candidate
            residual_blocks()
            return
        _log.debug("least-squares step left the parameter box; using L-BFGS-B")

    objective = _GroupObjective(model, stats, vartheta, group)
    z0 = objective.pack([q_params[i] for i in group.blocks])
    f0, _ = objective(z0)
    result = minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=objective.bounds(low, high),
        options={
            "maxcor": config.lbfgs_memory,
            "maxiter": config.lbfgs_max_iters,
        },
    )
    if not np.all(np.isfinite(result.x)) or not result.fun <= f0:
        _log.debug(f"L-BFGS-B made no progress on group {group.blocks}")
        return
    theta_g, _ = objective.unpack(result.x)
    vartheta[idx] = np.clip(theta_g, model.lower[idx], model.upper[idx])
    for i, p in zip(group.blocks, objective.block_params(result.x, low, high)):
        q_params[i] = p


def gm_step(
    theta_k: ThetaEstimate,
    stats: SufficientStats,
    model: StructuredModel,
    config: Optional[GemConfig] = None,
) -> ThetaEstimate:
    """Return a new estimate with Q(result, theta_k) >= Q(theta_k, theta_k).

    `stats` must come from smoothing under `theta_k`.  If no improving
    estimate is found, `theta_k` itself is returned (and a warning logged).
    """
    config = config or GemConfig()
    low, high = model.cov_eig_bounds
    q_slices, r_slices, _, _ = model.eta_slices()

    vartheta = theta_k.vartheta.copy()
    q_params = [theta_k.eta[s].copy() for s in q_slices]
    for group in _projector_groups(model):
        _update_group(model, stats, vartheta, q_params, group, config)

    S_y = _measurement_residual(stats, model.C)
    r_params = [
        _closed_form_block(
            block, block.projector @ S_y @ block.projector.T, low, high
        )
        for block in model.r_blocks
    ]
    x0_mean, x0_cov = _initial_state_update(model, stats)
    eta = np.concatenate(q_params + r_params + [x0_mean, vech(x0_cov)])

    try:
        candidate = ThetaEstimate.from_vectors(model, vartheta, eta)
        improved = conditional_loglik(candidate, stats, model)
    except (ModelValidationError, NumericalError) as e:
        _log.warning(f"GM-step produced an invalid estimate ({e}); keeping the previous one")
        return theta_k
    current = conditional_loglik(theta_k, stats, model)
    if improved < current - 1e-12 * max(1.0, abs(current)):
        _log.warning(
            "GM-step decreased the conditional log-likelihood; keeping the previous estimate"
        )
        return theta_k
    return candidate


# DRIVER


def initial_theta(model: StructuredModel, data: IoData) -> ThetaEstimate:
    """Return the default starting point: vartheta = 0 and covariances at the output scale."""
    data.check_against(model)
    low, high = model.cov_eig_bounds
    scale = float(np.clip(np.mean(np.var(data.Y, axis=0)), low, high))
    vartheta = project_to_box(model, np.zeros(model.n_theta))

    def scaled_identity(blocks: Sequence[CovBlockSpec], dim: int) -> np.ndarray:
        M = np.zeros((dim, dim))
        for block in blocks:
            if block.kind == "fixed":
                B = cast(np.ndarray, block.base)
            elif block.kind == "scaled":
                base = cast(np.ndarray, block.base)
                lam = scale * block.size / np.trace(base)
                B = float(np.clip(lam, *_scale_bounds(block, low, high))) * base
            else:
                B = scale * np.eye(block.size)
            M += block.projector.T @ B @ block.projector
        return M

    Q = scaled_identity(model.q_blocks, model.n_w)
    R = scaled_identity(model.r_blocks, model.n_y)
    eta = encode_covariances(
        model, Q, R, np.zeros(model.n_x), scale * np.eye(model.n_x)
    )
    return ThetaEstimate.from_vectors(model, vartheta, eta)


def _check_persistency(data: IoData) -> None:
    gram = data.U.T @ data.U / data.T
    if gram.size and float(la.eigvalsh(gram).min()) <= 1e-12 * max(
        1.0, float(np.abs(gram).max())
    ):
        _log.warning(
            "inputs are not persistently exciting; some parameters may not be identifiable"
        )


def run_gem(
    model: StructuredModel,
    data: IoData,
    theta_init: Optional[ThetaEstimate] = None,
    config: Optional[GemConfig] = None,
) -> Tuple[ThetaEstimate, GemTrace]:
    """Run generalized EM from `theta_init` until the log-likelihood stalls."""
    config = config or GemConfig()
    data.check_against(model)
    _check_persistency(data)
    theta = theta_init if theta_init is not None else initial_theta(model, data)

    try:
        stats, loglik = smooth(model, theta, data)
    except NumericalError as e:
        raise NumericalError(f"iteration 0: {e}") from None
    trace = GemTrace(logliks=[loglik])
    for it in range(1, config.max_iters + 1):
        try:
            new = gm_step(theta, stats, model, config)
            if new is theta:
                trace.fallbacks += 1
            stats, new_loglik = smooth(model, new, data)
        except (NumericalError, ModelValidationError) as e:
            raise type(e)(f"iteration {it}: {e}") from None
        trace.logliks.append(new_loglik)
        trace.iterations = it
        gain = new_loglik - loglik
        if gain < -_MONOTONE_SLACK * max(1.0, abs(loglik)):
            _log.warning(
                f"iteration {it}: log-likelihood decreased by {-gain:.3e}"
            )
        _log.debug(f"iteration {it}: loglik {new_loglik:.6f} (gain {gain:.3e})")
        theta, loglik = new, new_loglik
        epsilon = (
            config.epsilon
            if config.epsilon is not None
            else 1e-6 * abs(loglik)
        )
        if gain < epsilon:
            trace.converged = True
            break
    _log.info(
        f"identification {'converged' if trace.converged else 'stopped'} after {trace.iterations} iterations, loglik {loglik:.4f}"
    )
    return theta, trace
