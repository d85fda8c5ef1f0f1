# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Structured parameterization of an uncertain linear time-invariant system.

The system is

    x[t+1] = A x[t] + B u[t] + E w[t],   w ~ N(0, Q)
    y[t]   = C x[t] + v[t],              v ~ N(0, R)

with the dynamics affine in an unknown vector `vartheta`:

    [A, B] = [A0, B0] + E unvec(J vartheta + vartheta0)

and the noise covariances block-structured through orthogonal projectors.
Everything known before data arrives lives in `StructuredModel`; the
estimated quantities live in `ThetaEstimate`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, cast

import numpy as np
from scipy import linalg as la

from d2pc.lib.common import sym, unvec, vec
from d2pc.lib.validation import (
    ModelValidationError,
    check_posdef,
    check_shape,
)

if TYPE_CHECKING:
    from typing_extensions import Final

BLOCK_KINDS: Final = ("fixed", "scaled", "full")
DEFAULT_BOX: Final = 1e6
DEFAULT_EIG_BOUNDS: Final = (1e-8, 1e6)
_RANK_TOL: Final = 1e-9


def _min_rel_singular_value(M: np.ndarray) -> float:
    s = la.svdvals(M)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    return float(s[-1] / s[0])


def vech(M: np.ndarray) -> np.ndarray:
    """Return the lower triangle of `M` (row by row) as a vector."""
    return cast(np.ndarray, M[np.tril_indices(M.shape[0])])


def unvech(x: np.ndarray, n: int, symmetric: bool = True) -> np.ndarray:
    """Inverse of `vech`; `symmetric=False` leaves the upper triangle zero."""
    M = np.zeros((n, n))
    M[np.tril_indices(n)] = x
    if symmetric:
        M = M + np.tril(M, -1).T
    return M


@dataclass(frozen=True, eq=False)
class CovBlockSpec:
    """One diagonal block of a structured covariance.

    `projector` has orthonormal rows spanning the block subspace.  The block
    is either fixed to `base`, a positive multiple of `base`, or a full
    symmetric positive-definite matrix.
    """

    projector: np.ndarray
    kind: str
    base: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        projector = np.atleast_2d(np.asarray(self.projector, dtype=float))
        object.__setattr__(self, "projector", projector)
        if self.kind not in BLOCK_KINDS:
            raise ModelValidationError(
                f"covariance block kind '{self.kind}' must be one of the following: {', '.join(BLOCK_KINDS)}"
            )
        n = projector.shape[0]
        if not np.allclose(projector @ projector.T, np.eye(n), atol=1e-12):
            raise ModelValidationError(
                "covariance block projector must have orthonormal rows"
            )
        if self.kind == "full":
            if self.base is not None:
                raise ModelValidationError("a full block takes no base matrix")
            return
        if self.base is None:
            raise ModelValidationError(
                f"a {self.kind} block needs a base matrix"
            )
        base = np.atleast_2d(np.asarray(self.base, dtype=float))
        check_shape("base", base, (n, n))
        check_posdef("base", base)
        object.__setattr__(self, "base", sym(base))

    @classmethod
    def fixed(cls, projector: np.ndarray, base: np.ndarray) -> CovBlockSpec:
        """Block known exactly."""
        return cls(projector, "fixed", base)

    @classmethod
    def scaled(cls, projector: np.ndarray, base: np.ndarray) -> CovBlockSpec:
        """Block known up to a positive scale."""
        return cls(projector, "scaled", base)

    @classmethod
    def full(cls, projector: np.ndarray) -> CovBlockSpec:
        """Block with every entry unknown."""
        return cls(projector, "full")

    @property
    def size(self) -> int:
        return int(self.projector.shape[0])

    @property
    def n_params(self) -> int:
        if self.kind == "fixed":
            return 0
        if self.kind == "scaled":
            return 1
        return self.size * (self.size + 1) // 2

    def assemble(self, params: np.ndarray) -> np.ndarray:
        """Return the block matrix for its slice of eta."""
        if self.kind == "fixed":
            return cast(np.ndarray, self.base)
        if self.kind == "scaled":
            return float(params[0]) * cast(np.ndarray, self.base)
        L = unvech(params, self.size, symmetric=False)
        return sym(L @ L.T)

    def encode(self, block: np.ndarray) -> np.ndarray:
        """Return the eta slice reproducing `block` (best fit for scaled blocks)."""
        if self.kind == "fixed":
            return np.zeros(0)
        if self.kind == "scaled":
            base = cast(np.ndarray, self.base)
            lam = np.trace(la.solve(base, block, assume_a="pos")) / self.size
            return np.array([lam])
        try:
            L = la.cholesky(sym(block), lower=True)
        except la.LinAlgError:
            raise ModelValidationError(
                "cannot encode a full block that is not positive definite"
            ) from None
        return vech(L)


def _check_blocks(
    label: str, blocks: Sequence[CovBlockSpec], dim: int
) -> None:
    if not blocks:
        raise ModelValidationError(f"`{label}` needs at least one block")
    total = np.zeros((dim, dim))
    for i, block in enumerate(blocks):
        check_shape(f"{label}[{i}].projector", block.projector, (None, dim))
        total += block.projector.T @ block.projector
        for j in range(i):
            cross = block.projector @ blocks[j].projector.T
            if np.abs(cross).max(initial=0.0) > 1e-12:
                raise ModelValidationError(
                    f"`{label}` blocks {j} and {i} are not disjoint"
                )
    if not np.allclose(total, np.eye(dim), atol=1e-12):
        raise ModelValidationError(f"`{label}` blocks do not span R^{dim}")


@dataclass(frozen=True, eq=False)
class StructuredModel:
    """The known skeleton of the system and the structure of its unknowns."""

    A0: np.ndarray
    B0: np.ndarray
    E: np.ndarray
    C: np.ndarray
    J: np.ndarray
    vartheta0: np.ndarray
    q_blocks: Tuple[CovBlockSpec, ...]
    r_blocks: Tuple[CovBlockSpec, ...]
    theta_box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    x0_box: float = DEFAULT_BOX
    cov_eig_bounds: Tuple[float, float] = DEFAULT_EIG_BOUNDS
    name: str = field(default="model")

    def __post_init__(self) -> None:
        for label in ("A0", "B0", "E", "C", "J"):
            value = np.atleast_2d(np.asarray(getattr(self, label), float))
            object.__setattr__(self, label, value)
        object.__setattr__(
            self, "vartheta0", np.asarray(self.vartheta0, float).reshape(-1)
        )
        object.__setattr__(self, "q_blocks", tuple(self.q_blocks))
        object.__setattr__(self, "r_blocks", tuple(self.r_blocks))

        n_x = self.A0.shape[0]
        check_shape("A0", self.A0, (n_x, n_x))
        check_shape("B0", self.B0, (n_x, None))
        check_shape("E", self.E, (n_x, None))
        check_shape("C", self.C, (None, n_x))
        n_u, n_w = self.B0.shape[1], self.E.shape[1]
        check_shape("J", self.J, (n_w * (n_x + n_u), None))
        check_shape("vartheta0", self.vartheta0, (n_w * (n_x + n_u),))

        if _min_rel_singular_value(self.E) <= _RANK_TOL or n_w > n_x:
            raise ModelValidationError("`E` must have full column rank")
        # Positions-only outputs are the usual case, so full row rank.
        if (
            _min_rel_singular_value(self.C) <= _RANK_TOL
            or self.C.shape[0] > n_x
        ):
            raise ModelValidationError("`C` must have full row rank")
        if self.J.shape[1] == 0 or (
            _min_rel_singular_value(self.J) <= _RANK_TOL
            or self.J.shape[1] > self.J.shape[0]
        ):
            raise ModelValidationError("`J` must have full column rank")
        _check_blocks("q_blocks", self.q_blocks, n_w)
        _check_blocks("r_blocks", self.r_blocks, self.C.shape[0])

        low, high = self.cov_eig_bounds
        if not 0.0 < low <= high:
            raise ModelValidationError(
                "`cov_eig_bounds` must satisfy 0 < lambda_min <= lambda_max"
            )
        n_theta = self.J.shape[1]
        if self.theta_box is None:
            box = (
                np.full(n_theta, -DEFAULT_BOX),
                np.full(n_theta, DEFAULT_BOX),
            )
        else:
            box = (
                np.broadcast_to(
                    np.asarray(self.theta_box[0], float), (n_theta,)
                ).copy(),
                np.broadcast_to(
                    np.asarray(self.theta_box[1], float), (n_theta,)
                ).copy(),
            )
            if np.any(box[0] > box[1]):
                raise ModelValidationError(
                    "`theta_box` lower bounds exceed upper bounds"
                )
        object.__setattr__(self, "theta_box", box)
        if self.x0_box <= 0.0:
            raise ModelValidationError("`x0_box` must be positive")

    @property
    def n_x(self) -> int:
        return int(self.A0.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.B0.shape[1])

    @property
    def n_w(self) -> int:
        return int(self.E.shape[1])

    @property
    def n_y(self) -> int:
        return int(self.C.shape[0])

    @property
    def n_theta(self) -> int:
        return int(self.J.shape[1])

    @property
    def n_eta(self) -> int:
        n_x = self.n_x
        return (
            sum(b.n_params for b in self.q_blocks)
            + sum(b.n_params for b in self.r_blocks)
            + n_x
            + n_x * (n_x + 1) // 2
        )

    @cached_property
    def E_pinv(self) -> np.ndarray:
        return cast(np.ndarray, np.linalg.pinv(self.E, rcond=_RANK_TOL))

    @cached_property
    def gamma_offset(self) -> np.ndarray:
        """E^+ [A0, B0], the part of Gamma not driven by J vartheta + vartheta0."""
        return cast(np.ndarray, self.E_pinv @ np.hstack([self.A0, self.B0]))

    @cached_property
    def J_pinv(self) -> np.ndarray:
        return cast(np.ndarray, np.linalg.pinv(self.J))

    @property
    def lower(self) -> np.ndarray:
        return cast(Tuple[np.ndarray, np.ndarray], self.theta_box)[0]

    @property
    def upper(self) -> np.ndarray:
        return cast(Tuple[np.ndarray, np.ndarray], self.theta_box)[1]

    def eta_slices(self) -> Tuple[List[slice], List[slice], slice, slice]:
        """Return the eta slices of the Q blocks, R blocks, x0 mean and x0 covariance."""
        start = 0
        q_slices, r_slices = [], []
        for block in self.q_blocks:
            q_slices.append(slice(start, start + block.n_params))
            start += block.n_params
        for block in self.r_blocks:
            r_slices.append(slice(start, start + block.n_params))
            start += block.n_params
        mean = slice(start, start + self.n_x)
        start += self.n_x
        cov = slice(start, start + self.n_x * (self.n_x + 1) // 2)
        return q_slices, r_slices, mean, cov


def _check_vartheta(model: StructuredModel, vartheta: np.ndarray) -> np.ndarray:
    vartheta = np.asarray(vartheta, float).reshape(-1)
    return check_shape("vartheta", vartheta, (model.n_theta,))


def gamma_matrix(model: StructuredModel, vartheta: np.ndarray) -> np.ndarray:
    """Return Gamma = E^+ [A, B] for `vartheta`."""
    vartheta = _check_vartheta(model, vartheta)
    return model.gamma_offset + unvec(
        model.J @ vartheta + model.vartheta0,
        model.n_w,
        model.n_x + model.n_u,
    )


def assemble_dynamics(
    model: StructuredModel, vartheta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (A, B) for the parameter vector `vartheta`."""
    vartheta = _check_vartheta(model, vartheta)
    AB = np.hstack([model.A0, model.B0]) + model.E @ unvec(
        model.J @ vartheta + model.vartheta0,
        model.n_w,
        model.n_x + model.n_u,
    )
    return AB[:, : model.n_x], AB[:, model.n_x :]


def extract_parameters(
    model: StructuredModel, A: np.ndarray, B: np.ndarray
) -> np.ndarray:
    """Return the least-squares vartheta with vec(E^+[A, B]) - vartheta0 = J vartheta."""
    check_shape("A", A, (model.n_x, model.n_x))
    check_shape("B", B, (model.n_x, model.n_u))
    offset = vec(model.E_pinv @ np.hstack([A - model.A0, B - model.B0]))
    return cast(np.ndarray, model.J_pinv @ (offset - model.vartheta0))


def project_to_box(model: StructuredModel, vartheta: np.ndarray) -> np.ndarray:
    """Clip `vartheta` into the model's box."""
    return cast(np.ndarray, np.clip(vartheta, model.lower, model.upper))


def _assemble_structured(
    blocks: Sequence[CovBlockSpec], slices: Sequence[slice], eta: np.ndarray
) -> np.ndarray:
    dim = blocks[0].projector.shape[1]
    M = np.zeros((dim, dim))
    for block, part in zip(blocks, slices):
        M += block.projector.T @ block.assemble(eta[part]) @ block.projector
    return sym(M)


def unchecked_covariances(
    model: StructuredModel, eta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Like `assemble_covariances` without the eigenvalue bounds check."""
    eta = np.asarray(eta, float).reshape(-1)
    check_shape("eta", eta, (model.n_eta,))
    q_slices, r_slices, mean, cov = model.eta_slices()
    Q = _assemble_structured(model.q_blocks, q_slices, eta)
    R = _assemble_structured(model.r_blocks, r_slices, eta)
    return Q, R, eta[mean].copy(), unvech(eta[cov], model.n_x)


def _check_eig_bounds(
    label: str, M: np.ndarray, bounds: Tuple[float, float]
) -> None:
    w = la.eigvalsh(M)
    low, high = bounds
    slack = 1e-9
    if w.min() < low * (1.0 - slack) or w.max() > high * (1.0 + slack):
        raise ModelValidationError(
            f"`{label}` has eigenvalues in [{w.min():.3e}, {w.max():.3e}] outside cov_eig_bounds [{low:.3e}, {high:.3e}]"
        )


def assemble_covariances(
    model: StructuredModel, eta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (Q, R, x0_mean, x0_cov) for `eta`.

    Q is the sum of the projected blocks; so is R.  Raises
    `ModelValidationError` if any assembled covariance has an eigenvalue
    outside `cov_eig_bounds`.
    """
    Q, R, x0_mean, x0_cov = unchecked_covariances(model, eta)
    for label, M in (("Q", Q), ("R", R), ("x0_cov", x0_cov)):
        _check_eig_bounds(label, M, model.cov_eig_bounds)
    return Q, R, x0_mean, x0_cov


def encode_covariances(
    model: StructuredModel,
    Q: np.ndarray,
    R: np.ndarray,
    x0_mean: np.ndarray,
    x0_cov: np.ndarray,
) -> np.ndarray:
    """Return eta reproducing the given matrices as closely as the block structure allows."""
    check_shape("Q", Q, (model.n_w, model.n_w))
    check_shape("R", R, (model.n_y, model.n_y))
    check_shape("x0_mean", np.asarray(x0_mean), (model.n_x,))
    check_shape("x0_cov", x0_cov, (model.n_x, model.n_x))
    parts = [
        block.encode(block.projector @ Q @ block.projector.T)
        for block in model.q_blocks
    ]
    parts += [
        block.encode(block.projector @ R @ block.projector.T)
        for block in model.r_blocks
    ]
    parts += [np.asarray(x0_mean, float), vech(sym(x0_cov))]
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class ThetaEstimate:
    """Estimated parameters with their assembled matrices."""

    vartheta: np.ndarray
    eta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    @classmethod
    def from_vectors(
        cls,
        model: StructuredModel,
        vartheta: np.ndarray,
        eta: np.ndarray,
        check: bool = True,
    ) -> ThetaEstimate:
        vartheta = _check_vartheta(model, vartheta).copy()
        eta = np.asarray(eta, float).reshape(-1).copy()
        A, B = assemble_dynamics(model, vartheta)
        if check:
            Q, R, x0_mean, x0_cov = assemble_covariances(model, eta)
        else:
            Q, R, x0_mean, x0_cov = unchecked_covariances(model, eta)
        return cls(vartheta, eta, A, B, Q, R, x0_mean, x0_cov)

    @classmethod
    def from_matrices(
        cls,
        model: StructuredModel,
        vartheta: np.ndarray,
        Q: np.ndarray,
        R: np.ndarray,
        x0_mean: np.ndarray,
        x0_cov: np.ndarray,
    ) -> ThetaEstimate:
        eta = encode_covariances(model, Q, R, x0_mean, x0_cov)
        return cls.from_vectors(model, vartheta, eta)


def arx_model(
    n_y: int,
    n_u: int,
    order: int,
    box: float = DEFAULT_BOX,
    cov_eig_bounds: Tuple[float, float] = DEFAULT_EIG_BOUNDS,
) -> StructuredModel:
    """Return the observer-canonical ARX structure of the given order.

    The state stacks the last `order` outputs followed by the last
    `order - 1` inputs; only the newest output block is driven by the
    unknown coefficients and by the disturbance.
    """
    if order < 1 or n_y < 1 or n_u < 1:
        raise ModelValidationError("ARX dimensions and order must be positive")
    n_yy = order * n_y
    n_uu = (order - 1) * n_u
    n_x = n_yy + n_uu
    A0 = np.zeros((n_x, n_x))
    B0 = np.zeros((n_x, n_u))
    # Shift registers.
    for k in range(order - 1):
        A0[k * n_y : (k + 1) * n_y, (k + 1) * n_y : (k + 2) * n_y] = np.eye(
            n_y
        )
    for k in range(order - 2):
        rows = slice(n_yy + k * n_u, n_yy + (k + 1) * n_u)
        A0[rows, n_yy + (k + 1) * n_u : n_yy + (k + 2) * n_u] = np.eye(n_u)
    if order > 1:
        B0[n_yy + (order - 2) * n_u :, :] = np.eye(n_u)
    E = np.zeros((n_x, n_y))
    E[(order - 1) * n_y : n_yy, :] = np.eye(n_y)
    C = E.T.copy()
    # Every entry of the newest output row is free.
    n_theta = n_y * (n_x + n_u)
    return StructuredModel(
        A0=A0,
        B0=B0,
        E=E,
        C=C,
        J=np.eye(n_theta),
        vartheta0=np.zeros(n_theta),
        q_blocks=(CovBlockSpec.full(np.eye(n_y)),),
        r_blocks=(CovBlockSpec.full(np.eye(n_y)),),
        theta_box=(np.full(n_theta, -box), np.full(n_theta, box)),
        cov_eig_bounds=cov_eig_bounds,
        name=f"arx{order}",
    )
