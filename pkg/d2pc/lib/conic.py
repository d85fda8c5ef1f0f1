# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Declarative conic programs on top of cvxpy.

Design modules state their problems as a linear objective with equality,
second-order-cone and positive-semidefinite constraints; `ConicProblem.solve`
never raises on solver trouble and reports a status instead.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import (
    TYPE_CHECKING,
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    TextIO,
    Tuple,
    Union,
)

import cvxpy as cp
import numpy as np

from d2pc.lib.validation import ModelValidationError, SolverError

if TYPE_CHECKING:
    from typing_extensions import Final

_log = logging.getLogger(__name__)

SOLVER_STATUSES: Final = (
    "optimal",
    "inaccurate",
    "infeasible",
    "unbounded",
    "error",
)
DEFAULT_TOL: Final = 1e-8
SOLVER_PREFERENCE: Final = ("CLARABEL", "SCS")
# SCS is first-order; tighter requests stall it.
_SCS_TOL_FLOOR: Final = 1e-6

_STATUS_MAP: Final = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "inaccurate",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    cp.UNBOUNDED_INACCURATE: "unbounded",
}

Operand = Union[np.ndarray, cp.Expression, float]


def sym_expr(M: Operand) -> Operand:
    """Return the symmetric part of a square matrix expression."""
    return (M + M.T) / 2


def block(rows: Sequence[Sequence[Operand]]) -> cp.Expression:
    """Assemble a block matrix, raising `ModelValidationError` on bad sizes."""
    try:
        return cp.bmat(rows)
    except ValueError as e:
        raise ModelValidationError(f"blocks do not fit together: {e}") from None


def kron(a: Operand, b: Operand) -> Operand:
    """Kronecker product where either factor may be an affine expression."""
    if not isinstance(a, cp.Expression):
        if not isinstance(b, cp.Expression):
            return np.kron(a, b)
        a = np.atleast_2d(np.asarray(a, float))
        rows, cols = a.shape
        return block(
            [[float(a[i, j]) * b for j in range(cols)] for i in range(rows)]
        )
    if a.ndim == 0:
        return a * b
    rows, cols = a.shape
    return block([[a[i, j] * b for j in range(cols)] for i in range(rows)])


@dataclass(frozen=True, eq=False)
class SolveReport:
    """Outcome of one solve: status, objective and named primal values."""

    status: str
    objective: Optional[float]
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    iterations: Optional[int] = None
    wall_time: float = 0.0
    solver: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "inaccurate")

    def require(self, what: str) -> SolveReport:
        """Return self if a solution is available; raise `SolverError` otherwise."""
        if not self.ok:
            raise SolverError(
                f"{what}: solver status '{self.status}'", self.status
            )
        if self.status == "inaccurate":
            _log.warning(f"{what}: solver reported an inaccurate solution")
        return self

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


def _available_solvers(preference: Sequence[str]) -> List[str]:
    installed = set(cp.installed_solvers())
    solvers = [s for s in preference if s in installed]
    if not solvers:
        raise SolverError(
            f"none of the conic solvers {', '.join(preference)} is installed"
        )
    return solvers


def _solver_options(solver: str, tol: float) -> Dict[str, Any]:
    if solver == "CLARABEL":
        return {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol}
    if solver == "SCS":
        eps = max(tol, _SCS_TOL_FLOOR)
        return {"eps_abs": eps, "eps_rel": eps, "max_iters": 100000}
    return {}


class ConicProblem:
    """A conic program built incrementally from named variables and parameters."""

    def __init__(self, name: str = "problem") -> None:
        self.name = name
        self._variables: Dict[str, cp.Variable] = {}
        self._parameters: Dict[str, cp.Parameter] = {}
        self._constraints: List[cp.Constraint] = []
        self._objective: Optional[cp.Expression] = None
        self._problem: Optional[cp.Problem] = None

    def _register(self, name: str) -> None:
        if name in self._variables or name in self._parameters:
            raise ModelValidationError(
                f"'{name}' is already declared in conic problem '{self.name}'"
            )
        self._problem = None

    def variable(
        self,
        name: str,
        shape: Union[int, Tuple[int, ...]] = (),
        symmetric: bool = False,
        nonneg: bool = False,
    ) -> cp.Variable:
        self._register(name)
        kwargs: Dict[str, Any] = {"name": name}
        if symmetric:
            kwargs["symmetric"] = True
        if nonneg:
            kwargs["nonneg"] = True
        var = cp.Variable(shape, **kwargs)
        self._variables[name] = var
        return var

    def parameter(
        self,
        name: str,
        shape: Union[int, Tuple[int, ...]] = (),
        value: Optional[np.ndarray] = None,
    ) -> cp.Parameter:
        self._register(name)
        param = cp.Parameter(shape, name=name)
        if value is not None:
            param.value = value
        self._parameters[name] = param
        return param

    def set_parameter(self, name: str, value: Any) -> None:
        try:
            self._parameters[name].value = value
        except KeyError:
            raise ModelValidationError(
                f"conic problem '{self.name}' has no parameter '{name}'"
            ) from None

    def add(self, constraint: cp.Constraint) -> None:
        """Add an affine equality or elementwise inequality."""
        self._constraints.append(constraint)
        self._problem = None

    def add_psd(self, expr: Operand, margin: float = 0.0) -> None:
        """Require the symmetric part of `expr` to be >= margin * I."""
        n = expr.shape[0]
        self.add(sym_expr(expr) >> margin * np.eye(n))

    def add_soc(self, x: Operand, t: Operand) -> None:
        """Require ||x|| <= t."""
        x = cp.Expression.cast_to_const(x)
        t = cp.Expression.cast_to_const(t)
        self.add(cp.SOC(t, cp.vec(x) if x.ndim > 1 else x))

    def minimize(self, objective: Operand) -> None:
        self._objective = objective
        self._problem = None

    @property
    def problem(self) -> cp.Problem:
        if self._problem is None:
            objective = cp.Minimize(
                self._objective if self._objective is not None else 0
            )
            self._problem = cp.Problem(objective, self._constraints)
        return self._problem

    def solve(
        self,
        tol: float = DEFAULT_TOL,
        solvers: Sequence[str] = SOLVER_PREFERENCE,
    ) -> SolveReport:
        """Solve with the first installed solver that returns a usable answer."""
        problem = self.problem
        status, solver_used = "error", None
        start = time.perf_counter()
        for solver in _available_solvers(solvers):
            try:
                problem.solve(solver=solver, **_solver_options(solver, tol))
            except (cp.error.SolverError, ValueError, ArithmeticError) as e:
                _log.debug(f"{self.name}: {solver} failed ({e})")
                continue
            status = _STATUS_MAP.get(problem.status, "error")
            solver_used = solver
            if status in ("optimal", "infeasible", "unbounded"):
                break
        wall = time.perf_counter() - start

        if status not in ("optimal", "inaccurate"):
            _log.debug(f"{self.name}: status {status}")
            return SolveReport(status, None, wall_time=wall, solver=solver_used)
        values = {
            name: np.asarray(var.value, float)
            for name, var in self._variables.items()
            if var.value is not None
        }
        stats = problem.solver_stats
        return SolveReport(
            status=status,
            objective=None if problem.value is None else float(problem.value),
            values=values,
            iterations=None if stats is None else stats.num_iters,
            wall_time=wall,
            solver=solver_used,
        )

    def dump(self, stream: TextIO) -> None:
        """Write the problem in a CBF-like text format for debugging."""
        from d2pc.lib.report import render

        data, _, _ = self.problem.get_problem_data(cp.SCS)
        dims = data["dims"]
        A = data["A"].tocoo()
        cones = []
        if dims.zero:
            cones.append(("L=", dims.zero))
        if dims.nonneg:
            cones.append(("L+", dims.nonneg))
        cones += [("Q", size) for size in dims.soc]
        # SCS packs each PSD block as a scaled lower triangle.
        cones += [("SVEC", size * (size + 1) // 2) for size in dims.psd]
        render(
            "conic.cbf.in",
            stream,
            name=self.name,
            n_vars=A.shape[1],
            n_rows=A.shape[0],
            cones=cones,
            objective=[(i, v) for i, v in enumerate(data["c"]) if v != 0.0],
            # Rows are b - A x in the cone.
            entries=list(zip(A.row, A.col, -A.data)),
            offsets=[(i, v) for i, v in enumerate(data["b"]) if v != 0.0],
        )
