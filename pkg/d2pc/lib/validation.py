# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Exceptions, argument validators and shape checks.

Validators for command-line arguments raise `OptionParseError` on invalid
input.  Library code raises the domain exceptions below.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Callable, List, Optional, Tuple, TypeVar

import numpy as np

if TYPE_CHECKING:
    from typing_extensions import Final


class OptionParseError(Exception):
    """Exception when options are given incorrect arguments."""


class ModelValidationError(ValueError):
    """Exception when inputs violate a structural invariant."""


class NumericalError(ArithmeticError):
    """Exception when a matrix that must be invertible or definite is not."""


class SolverError(RuntimeError):
    """Exception when a conic problem ends without a usable solution."""

    def __init__(self, message: str, status: str = "error") -> None:
        super().__init__(message)
        self.status = status


class InfeasibleStartError(SolverError):
    """Exception when the online problem is infeasible at the first step."""


# NUMBERS


def validate_probability(arg: str) -> float:
    """Return `arg` as a float if it lies strictly between 0 and 1.

    Raises `OptionParseError` on invalid input.
    """
    try:
        value = float(arg)
    except ValueError:
        raise OptionParseError(f"'{arg}' is not a number") from None
    if not 0.0 < value < 1.0:
        raise OptionParseError(f"probability '{arg}' must be in (0, 1)")
    return value


def validate_positive_int(arg: str) -> int:
    """Return `arg` as an int if it is positive.

    Raises `OptionParseError` on invalid input.
    """
    try:
        value = int(arg)
    except ValueError:
        raise OptionParseError(f"'{arg}' is not an integer") from None
    if value < 1:
        raise OptionParseError(f"'{arg}' must be a positive integer")
    return value


def validate_nonnegative_int(arg: str) -> int:
    """Return `arg` as an int if it is zero or positive.

    Raises `OptionParseError` on invalid input.
    """
    try:
        value = int(arg)
    except ValueError:
        raise OptionParseError(f"'{arg}' is not an integer") from None
    if value < 0:
        raise OptionParseError(f"'{arg}' must not be negative")
    return value


def validate_seed(arg: str) -> int:
    """Return `arg` as an int if it fits an unsigned 64-bit seed.

    Raises `OptionParseError` on invalid input.
    """
    try:
        value = int(arg)
    except ValueError:
        raise OptionParseError(f"seed '{arg}' is not an integer") from None
    if not 0 <= value < 2 ** 64:
        raise OptionParseError(f"seed '{arg}' must fit in 64 unsigned bits")
    return value


# TUBE MODES

TUBE_MODES: Final = ("soc", "lmi")


def validate_mode(mode: str) -> str:
    """Return `mode` unchanged if it names a tube-dynamics formulation.

    Raises `OptionParseError` on invalid input.
    """
    if mode not in TUBE_MODES:
        raise OptionParseError(
            f"mode '{mode}' must be one of the following: {', '.join(TUBE_MODES)}"
        )
    return mode


T = TypeVar("T")


def list_of(validator: Callable[[str], T]) -> Callable[[str], List[T]]:
    """Run `validator` on a comma-delimited list of arguments."""

    def list_validator(arg: str) -> List[T]:
        if arg == "":
            return []
        return [validator(value) for value in arg.split(",")]

    return list_validator


# ARRAYS


def check_shape(
    label: str, M: np.ndarray, dims: Tuple[Optional[int], ...]
) -> np.ndarray:
    """Return `M` unchanged if its shape matches `dims` (`None` matches anything).

    Raises `ModelValidationError` on a mismatch.
    """
    if M.ndim != len(dims) or any(
        d is not None and d != s for d, s in zip(dims, M.shape)
    ):
        expected = tuple("*" if d is None else d for d in dims)
        raise ModelValidationError(
            f"Mismatched dimensions: `{label}` has shape {M.shape}. Expected {expected}."
        )
    return M


def check_symmetric(label: str, M: np.ndarray, rtol: float = 1e-9) -> None:
    """Raise `ModelValidationError` unless `M` is square and symmetric."""
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelValidationError(f"`{label}` must be a square matrix")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if not np.allclose(M, M.T, atol=rtol * scale, rtol=0.0):
        raise ModelValidationError(f"`{label}` must be symmetric")


def check_posdef(label: str, M: np.ndarray, semi: bool = False) -> None:
    """Raise `ModelValidationError` unless `M` is symmetric positive (semi)definite."""
    check_symmetric(label, M)
    lowest = float(np.linalg.eigvalsh(M).min()) if M.size else 1.0
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if semi and lowest < -1e-10 * scale:
        raise ModelValidationError(
            f"`{label}` must be positive semidefinite (min eigenvalue {lowest:.3e})"
        )
    if not semi and lowest <= 0.0:
        raise ModelValidationError(
            f"`{label}` must be positive definite (min eigenvalue {lowest:.3e})"
        )
