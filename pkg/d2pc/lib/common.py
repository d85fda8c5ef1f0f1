# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Common functions and classes shared by the pipeline stages.

Also includes a parser from `argparse` to base subcommands on, plus the small
linear-algebra helpers (vectorization, symmetric square roots) that every
stage uses.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from argparse import _VersionAction
from concurrent.futures import ThreadPoolExecutor
from os import EX_USAGE
from typing import (
    TYPE_CHECKING,
    Callable,
    Iterable,
    List,
    Optional,
    Tuple,
    TypeVar,
    cast,
)

import numpy as np
from scipy import linalg as la

from d2pc._package import __version__
from d2pc.lib.validation import (
    ModelValidationError,
    OptionParseError,
    validate_mode,
    validate_probability,
    validate_seed,
)

if TYPE_CHECKING:
    from typing_extensions import Final

T = TypeVar("T")
R = TypeVar("R")


BASE_PARSER: Final = argparse.ArgumentParser(add_help=False)
_VERSION_FORMAT_ACTION: Final = cast(
    _VersionAction,
    BASE_PARSER.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s (d2pc) {__version__}",
    ),
)
VERSION_FORMAT_STRING: Final = _VERSION_FORMAT_ACTION.version
BASE_PARSER.add_argument(
    "--verbose", "-v", action="count", help="show more output"
)
BASE_PARSER.add_argument(
    "--quiet", "-q", action="count", help="show less output"
)
BASE_PARSER.add_argument(
    "--config",
    metavar="PATH",
    help="read pipeline defaults from the JSON document at PATH",
)
BASE_PARSER.add_argument(
    "--seed", type=validate_seed, metavar="U64", help="random seed"
)
BASE_PARSER.add_argument(
    "--delta",
    type=validate_probability,
    metavar="F64",
    help="probability level of the parameter confidence ellipsoid",
)
BASE_PARSER.add_argument(
    "--mode",
    type=validate_mode,
    metavar="soc|lmi",
    help="tube dynamics formulation of the online problem",
)
BASE_PARSER.add_argument(
    "--out",
    dest="outdir",
    metavar="DIR",
    help="write artifacts into DIR",
)
BASE_PARSER.add_argument(
    "--json-errors",
    action="store_true",
    help="also print fatal errors as a JSON object on stdout",
)


class ExecContext(argparse.Namespace):
    """Data holder for global values of a pipeline run.

    `None` means "not given on the command line"; the configuration file or
    the built-in defaults fill it in afterwards.
    """

    def __init__(self) -> None:
        self.verbose: int = 0
        self.quiet: int = 0
        self.config: Optional[str] = None
        self.seed: Optional[int] = None
        self.delta: Optional[float] = None
        self.mode: Optional[str] = None
        self.outdir: Optional[str] = None
        self.json_errors: bool = False


# Levels reachable with -v and -q, starting from INFO.
LOG_LEVELS: Final = (
    logging.DEBUG,
    logging.INFO,
    logging.WARNING,
    logging.ERROR,
    logging.CRITICAL,
)


def get_logger(name: str) -> logging.Logger:
    """Return the program logger.

    Library modules log under `name` too (`d2pc.lib.*`), so they share its
    handler and its level.
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    # `main()` may run several times in one process.
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("{name}: {message}", style="{"))
        logger.addHandler(handler)
    return logger


def set_logger_verbosity(
    log: logging.Logger, quieter: int, louder: int
) -> None:
    """Move the level of `log` one step per -q or -v, within DEBUG..CRITICAL."""
    step = LOG_LEVELS.index(logging.INFO) + quieter - louder
    log.setLevel(LOG_LEVELS[max(0, min(step, len(LOG_LEVELS) - 1))])


def setup_cli(
    progname: str,
    argv: Optional[List[str]],
    parser: argparse.ArgumentParser,
    ctx: ExecContext,
) -> Tuple[ExecContext, logging.Logger]:
    """Parse `argv` into `ctx` and return it with the configured logger.

    Invalid arguments are logged and exit with EX_USAGE.
    """
    log = get_logger(progname)
    try:
        parser.parse_args(argv, namespace=ctx)
    except OptionParseError as e:
        log.critical(f"{e}")
        sys.exit(EX_USAGE)
    except SystemExit as e:
        # Only --help and --version exit cleanly; argparse uses 2 otherwise.
        if e.code != 0:
            sys.exit(EX_USAGE)
        raise
    set_logger_verbosity(log, ctx.quiet or 0, ctx.verbose or 0)
    return ctx, log


# PARALLELISM

THREADS_ENV_VAR: Final = "D2PC_THREADS"


def get_num_threads() -> int:
    """Return the worker cap from `D2PC_THREADS`, defaulting to the CPU count."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        threads = int(raw)
    except ValueError:
        raise ModelValidationError(
            f"{THREADS_ENV_VAR}='{raw}' is not an integer"
        ) from None
    return max(1, threads)


def parallel_map(
    func: Callable[[T], R],
    items: Iterable[T],
    threads: Optional[int] = None,
) -> List[R]:
    """Map `func` over `items`, keeping order, on at most `threads` workers."""
    items = list(items)
    if threads is None:
        threads = get_num_threads()
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(func, items))


# LINEAR ALGEBRA

# Column-major everywhere: vec stacks columns.


def vec(M: np.ndarray) -> np.ndarray:
    """Stack the columns of `M` into a vector."""
    return np.asarray(M).flatten(order="F")


def unvec(x: np.ndarray, m: int, n: int) -> np.ndarray:
    """Inverse of `vec` for an `m`-by-`n` matrix."""
    x = np.asarray(x)
    if x.size != m * n:
        raise ModelValidationError(
            f"cannot reshape a vector of length {x.size} into {m}x{n}"
        )
    return x.reshape((m, n), order="F")


def commutation(m: int, n: int) -> np.ndarray:
    """Return the permutation P with P vec(V) = vec(V^T) for `m`-by-`n` V."""
    P = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            P[i * n + j, j * m + i] = 1.0
    return P


def rows_to_matrix(v: np.ndarray, n: int, m: int) -> np.ndarray:
    """Return V = (I_n kron v^T)(vec(I_n) kron I_m).

    The identity reproduces the `n`-by-`m` matrix whose rows are the
    consecutive length-`m` chunks of `v`, i.e. `v = vec(V^T)`.
    """
    v = np.asarray(v).reshape(-1)
    if v.size != n * m:
        raise ModelValidationError(
            f"vector of length {v.size} cannot fill a {n}x{m} matrix"
        )
    return np.kron(np.eye(n), v[None, :]) @ np.kron(
        vec(np.eye(n))[:, None], np.eye(m)
    )


def sym(M: np.ndarray) -> np.ndarray:
    """Return the symmetric part of `M`."""
    return 0.5 * (M + M.T)


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Return the symmetric square root of a positive semidefinite matrix."""
    w, V = la.eigh(sym(M))
    return cast(np.ndarray, (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T)


def psd_inv_sqrt(M: np.ndarray) -> np.ndarray:
    """Return the symmetric inverse square root of a positive definite matrix."""
    w, V = la.eigh(sym(M))
    if w.min() <= 0.0:
        raise ModelValidationError("matrix is not positive definite")
    return cast(np.ndarray, (V / np.sqrt(w)) @ V.T)


def clip_eigenvalues(M: np.ndarray, low: float, high: float) -> np.ndarray:
    """Project a symmetric matrix onto {low I <= M <= high I}."""
    w, V = la.eigh(sym(M))
    return sym((V * np.clip(w, low, high)) @ V.T)


def spectral_radius(A: np.ndarray) -> float:
    """Return max |eig(A)|."""
    return float(np.abs(la.eigvals(A)).max()) if A.size else 0.0


def blkdiag(*blocks: np.ndarray) -> np.ndarray:
    """Return the block-diagonal concatenation of `blocks`."""
    return cast(np.ndarray, la.block_diag(*blocks))
