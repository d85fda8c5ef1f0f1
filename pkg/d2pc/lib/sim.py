# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Ground-truth simulation, data generation and Monte Carlo evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import (
    TYPE_CHECKING,
    Callable,
    Dict,
    List,
    Optional,
    Protocol,
    Sequence,
    Tuple,
)

import numpy as np

from d2pc.lib.common import parallel_map, sym
from d2pc.lib.gem import GemConfig, run_gem
from d2pc.lib.model import (
    CovBlockSpec,
    StructuredModel,
    ThetaEstimate,
    assemble_dynamics,
    extract_parameters,
)
from d2pc.lib.mpcdesign import ConstraintSpec, MpcDesign
from d2pc.lib.mpconline import OnlineMpc, initial_state
from d2pc.lib.smoother import IoData
from d2pc.lib.synth import PerformanceSpec, RobustController
from d2pc.lib.uq import confidence_ellipsoid, observed_information
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

MSD_DT: Final = 0.1
MSD_NOISE: Final = 3e-4
MSD_MASS: Final = (0.9, 1.1)
MSD_SPRING: Final = (1.8, 2.2)
MSD_DAMPER: Final = (0.9, 1.1)
MSD_BOX: Final = 5.0


@dataclass(frozen=True, eq=False)
class TruthSystem:
    """The true plant x+ = A x + B u + E w, y = C x + v with x0 ~ N(x0_mean, x0_cov)."""

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    def __post_init__(self) -> None:
        n_x = self.A.shape[0]
        check_shape("A", self.A, (n_x, n_x))
        check_shape("B", self.B, (n_x, None))
        check_shape("E", self.E, (n_x, None))
        check_shape("C", self.C, (None, n_x))
        check_shape("Q", self.Q, (self.E.shape[1], self.E.shape[1]))
        check_shape("R", self.R, (self.C.shape[0], self.C.shape[0]))
        check_shape("x0_mean", self.x0_mean, (n_x,))
        check_shape("x0_cov", self.x0_cov, (n_x, n_x))
        for label in ("Q", "R", "x0_cov"):
            check_posdef(label, sym(getattr(self, label)), semi=True)

    @property
    def n_x(self) -> int:
        return int(self.A.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.B.shape[1])

    @property
    def n_y(self) -> int:
        return int(self.C.shape[0])

    def _noise(self, rng: np.random.Generator, cov: np.ndarray) -> np.ndarray:
        return rng.multivariate_normal(np.zeros(cov.shape[0]), cov, method="eigh")

    def initial(self, rng: np.random.Generator) -> np.ndarray:
        return self.x0_mean + self._noise(rng, self.x0_cov)

    def measure(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.C @ x + self._noise(rng, self.R)

    def advance(
        self, x: np.ndarray, u: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        return self.A @ x + self.B @ u + self.E @ self._noise(rng, self.Q)


# MASS-SPRING-DAMPER CHAIN


def _msd_structure(
    n: int, dt: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (A0, B0, E, C, J) of the chain with unknown accelerations.

    Row i of the acceleration depends on the springs and dampers to its
    left and right neighbours and on its own input gain, each scaled by
    1/m_i.  Per row that gives a left and a right coefficient for positions
    and velocities (the last mass has no right neighbour) and one input
    gain: 5n - 2 parameters in total.  Diagonal entries are minus the sum
    of the row's coefficients; a missing left neighbour is the wall.
    """
    n_x, m = 2 * n, 3 * n
    A0 = np.eye(n_x)
    A0[:n, n:] = dt * np.eye(n)
    B0 = np.zeros((n_x, n))
    E = np.vstack([np.zeros((n, n)), np.eye(n)])
    C = np.hstack([np.eye(n), np.zeros((n, n))])

    columns = []

    def coefficient(entries: Sequence[Tuple[int, int, float]]) -> None:
        Gamma = np.zeros((n, m))
        for row, col, value in entries:
            Gamma[row, col] += value
        columns.append(Gamma.reshape(-1, order="F"))

    for offset in (0, n):
        for i in range(n):
            left = [(i, offset + i, -1.0)]
            if i > 0:
                left.append((i, offset + i - 1, 1.0))
            coefficient(left)
            if i < n - 1:
                coefficient([(i, offset + i, -1.0), (i, offset + i + 1, 1.0)])
    for i in range(n):
        coefficient([(i, 2 * n + i, 1.0)])
    return A0, B0, E, C, np.column_stack(columns)


def msd_parameters(
    masses: np.ndarray, springs: np.ndarray, dampers: np.ndarray, dt: float
) -> np.ndarray:
    """Return vartheta for physical constants in the ordering of `build_msd_chain`."""
    n = masses.shape[0]
    values = []
    for coupling in (springs, dampers):
        for i in range(n):
            values.append(dt * coupling[i] / masses[i])
            if i < n - 1:
                values.append(dt * coupling[i + 1] / masses[i])
    values += [dt / masses[i] for i in range(n)]
    return np.asarray(values)


def build_msd_chain(
    n_masses: int,
    seed: Optional[int] = None,
    dt: float = MSD_DT,
    noise: float = MSD_NOISE,
    x0_mean: Optional[np.ndarray] = None,
    x0_cov: Optional[np.ndarray] = None,
) -> Tuple[TruthSystem, StructuredModel]:
    """Return a random chain of masses and its structured model.

    Forces act on every mass, disturbances on every velocity and only
    positions are measured.  Q and R are estimated as multiples of I.
    """
    if n_masses < 1:
        raise ModelValidationError(f"n_masses {n_masses} must be positive")
    n = n_masses
    rng = np.random.default_rng(seed)
    masses = rng.uniform(*MSD_MASS, size=n)
    springs = rng.uniform(*MSD_SPRING, size=n)
    dampers = rng.uniform(*MSD_DAMPER, size=n)

    A0, B0, E, C, J = _msd_structure(n, dt)
    n_theta = J.shape[1]
    model = StructuredModel(
        A0=A0,
        B0=B0,
        E=E,
        C=C,
        J=J,
        vartheta0=np.zeros(J.shape[0]),
        q_blocks=(CovBlockSpec.scaled(np.eye(n), np.eye(n)),),
        r_blocks=(CovBlockSpec.scaled(np.eye(n), np.eye(n)),),
        theta_box=(np.full(n_theta, -MSD_BOX), np.full(n_theta, MSD_BOX)),
        name=f"msd{n}",
    )
    A, B = assemble_dynamics(model, msd_parameters(masses, springs, dampers, dt))
    n_x = 2 * n
    truth = TruthSystem(
        A=A,
        B=B,
        E=E,
        C=C,
        Q=noise * np.eye(n),
        R=noise * np.eye(n),
        x0_mean=np.zeros(n_x) if x0_mean is None else np.asarray(x0_mean, float),
        x0_cov=1e-6 * np.eye(n_x) if x0_cov is None else np.asarray(x0_cov, float),
    )
    return truth, model


def msd_constraints(
    n_masses: int,
    velocity_bound: float = 0.3,
    input_bound: float = 3.5,
    p: float = 0.95,
) -> ConstraintSpec:
    """Return velocity and force bounds on every mass."""
    n = n_masses
    return ConstraintSpec.from_bounds(
        2 * n,
        n,
        p,
        state_bounds=[(n + i, velocity_bound) for i in range(n)],
        input_bounds=[(i, input_bound) for i in range(n)],
    )


def msd_performance(
    truth: TruthSystem, input_weight: float = 1e-4
) -> PerformanceSpec:
    """Return eps = [C x; input_weight u]."""
    n_y, n_u = truth.n_y, truth.n_u
    C_eps = np.vstack([truth.C, np.zeros((n_u, truth.n_x))])
    D_eps = np.vstack([np.zeros((n_y, n_u)), input_weight * np.eye(n_u)])
    return PerformanceSpec(C_eps, D_eps)


def theta_from_truth(
    model: StructuredModel, truth: TruthSystem
) -> ThetaEstimate:
    """Return the estimate that reproduces `truth` as closely as `model` allows."""
    vartheta = extract_parameters(model, truth.A, truth.B)
    return ThetaEstimate.from_matrices(
        model, vartheta, truth.Q, truth.R, truth.x0_mean, truth.x0_cov
    )


# DATA


def generate_data(
    truth: TruthSystem,
    T: int,
    input_cov: np.ndarray,
    seed: Optional[int] = None,
) -> IoData:
    """Simulate T steps driven by u ~ N(0, input_cov); rows of Y are y_1..y_T."""
    if T < 1:
        raise ModelValidationError(f"T = {T} must be positive")
    input_cov = np.atleast_2d(np.asarray(input_cov, float))
    check_shape("input_cov", input_cov, (truth.n_u, truth.n_u))
    rng = np.random.default_rng(seed)
    U = rng.multivariate_normal(np.zeros(truth.n_u), input_cov, size=T, method="eigh")
    Y = np.empty((T, truth.n_y))
    x = truth.initial(rng)
    for t in range(T):
        x = truth.advance(x, U[t], rng)
        Y[t] = truth.measure(x, rng)
    return IoData(Y=Y, U=U)


def coverage_experiment(
    truth: TruthSystem,
    model: StructuredModel,
    T: int,
    deltas: Sequence[float],
    reps: int,
    seed: int,
    input_cov: Optional[np.ndarray] = None,
    gem_config: Optional[GemConfig] = None,
    threads: Optional[int] = None,
) -> Dict[float, float]:
    """Return, per delta, how often the confidence ellipsoid holds the true parameter.

    Repetitions whose identification or information matrix fails are
    counted as misses and logged.
    """
    input_cov = 4.0 * np.eye(truth.n_u) if input_cov is None else input_cov
    vartheta_true = extract_parameters(model, truth.A, truth.B)
    seeds = np.random.SeedSequence(seed).spawn(reps)

    def one(ss: np.random.SeedSequence) -> List[bool]:
        data = generate_data(truth, T, input_cov, int(ss.generate_state(1)[0]))
        try:
            theta_hat, _ = run_gem(model, data, config=gem_config)
            H = observed_information(model, theta_hat, data, threads=1)
        except (NumericalError, ModelValidationError) as e:
            _log.warning(f"coverage repetition failed ({e})")
            return [False] * len(deltas)
        return [
            confidence_ellipsoid(theta_hat.vartheta, H, delta).contains(
                vartheta_true
            )
            for delta in deltas
        ]

    hits = np.array(parallel_map(one, seeds, threads), dtype=bool)
    return {
        float(delta): float(hits[:, k].mean()) for k, delta in enumerate(deltas)
    }


# POLICIES


class Policy(Protocol):
    @property
    def infeasible_solves(self) -> int:
        ...

    def reset(self) -> None:
        ...

    def act(self, y: np.ndarray) -> Tuple[np.ndarray, float]:
        """Return the input for this step and the time spent computing it."""
        ...


class LinearPolicy:
    """u = K x_c + nu_t, x_c+ = A_c x_c + L y with an optional fixed plan nu."""

    def __init__(
        self,
        A_c: np.ndarray,
        K: np.ndarray,
        L: np.ndarray,
        feedforward: Optional[np.ndarray] = None,
        x_c0: Optional[np.ndarray] = None,
    ) -> None:
        self.A_c, self.K, self.L = A_c, K, L
        self.feedforward = feedforward
        self.x_c0 = np.zeros(A_c.shape[0]) if x_c0 is None else x_c0
        self.infeasible_solves = 0
        self.reset()

    @classmethod
    def from_controller(cls, controller: RobustController) -> LinearPolicy:
        return cls(controller.A_c, controller.K, controller.L)

    def reset(self) -> None:
        self.x_c = self.x_c0.copy()
        self.t = 0

    def act(self, y: np.ndarray) -> Tuple[np.ndarray, float]:
        u = self.K @ self.x_c
        if self.feedforward is not None and self.t < self.feedforward.shape[0]:
            u = u + self.feedforward[self.t]
        self.x_c = self.A_c @ self.x_c + self.L @ y
        self.t += 1
        return u, 0.0


class MpcPolicy:
    """The receding-horizon controller, re-solving at every step."""

    def __init__(self, design: MpcDesign, mode: str = "soc") -> None:
        self.mpc = OnlineMpc(design, mode)
        self.reset()

    @property
    def infeasible_solves(self) -> int:
        return self.mpc.infeasible_solves

    def reset(self) -> None:
        self.state = initial_state(self.mpc.design)

    def act(self, y: np.ndarray) -> Tuple[np.ndarray, float]:
        start = time.perf_counter()
        u, _, self.state = self.mpc.step(self.state, y)
        return u, time.perf_counter() - start


@dataclass(frozen=True)
class MpcPlan:
    nu: np.ndarray
    alpha: np.ndarray
    mean_solve_time: float
    infeasible_solves: int


def mpc_plan(design: MpcDesign, steps: int, mode: str = "soc") -> MpcPlan:
    """Return the input corrections the controller applies over `steps` steps.

    The online cost and constraints never see measurements, so the plan
    is the same for every disturbance realization.
    """
    mpc = OnlineMpc(design, mode)
    state = initial_state(design)
    nu = np.empty((steps, design.n_u))
    alpha = np.empty(steps)
    times = []
    y_dummy = np.zeros(design.L.shape[1])
    for t in range(steps):
        start = time.perf_counter()
        _, solution, state = mpc.step(state, y_dummy)
        times.append(time.perf_counter() - start)
        nu[t] = solution.nu[0]
        alpha[t] = solution.alpha[0]
    return MpcPlan(
        nu=nu,
        alpha=alpha,
        mean_solve_time=math.fsum(times) / max(1, steps),
        infeasible_solves=mpc.infeasible_solves,
    )


def mpc_policy_factory(
    design: MpcDesign, steps: int, mode: str = "soc", reuse_plan: bool = True
) -> Tuple[Callable[[], Policy], float]:
    """Return a policy factory for Monte Carlo and the mean per-step solve time.

    With `reuse_plan` the plan is computed once and replayed by a linear
    policy in every rollout.
    """
    if not reuse_plan:
        return (lambda: MpcPolicy(design, mode)), float("nan")
    plan = mpc_plan(design, steps, mode)

    def make() -> Policy:
        policy = LinearPolicy(
            design.A_c,
            design.K,
            design.L,
            feedforward=plan.nu,
            x_c0=design.mu_xi0[design.n_x :],
        )
        policy.infeasible_solves = plan.infeasible_solves
        return policy

    return make, plan.mean_solve_time


# MONTE CARLO


@dataclass(frozen=True, eq=False)
class RolloutMetrics:
    stage_costs: np.ndarray
    violations: np.ndarray
    solve_times: np.ndarray
    infeasible_solves: int = 0
    aborted: bool = False
    error: Optional[str] = None

    @property
    def cost(self) -> float:
        return math.fsum(self.stage_costs) / max(1, self.stage_costs.shape[0])


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    runs: int
    aborted: int
    mean_cost: float
    cost_stderr: float
    violation_rate: np.ndarray
    run_violation_rate: float
    mean_solve_time: float
    infeasible_solves: int
    per_run: List[RolloutMetrics] = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        """Largest per-step empirical violation frequency over all constraints."""
        return float(self.violation_rate.max(initial=0.0))


def rollout(
    truth: TruthSystem,
    policy: Policy,
    constraints: ConstraintSpec,
    perf: PerformanceSpec,
    steps: int,
    rng: np.random.Generator,
) -> RolloutMetrics:
    """Run one closed-loop trajectory of `steps` steps against the truth."""
    policy.reset()
    costs = np.empty(steps)
    violations = np.zeros((steps, constraints.r), dtype=bool)
    times = np.zeros(steps)
    x = truth.initial(rng)
    for t in range(steps):
        y = truth.measure(x, rng)
        try:
            u, times[t] = policy.act(y)
        except SolverError as e:
            return RolloutMetrics(
                costs[:t],
                violations[:t],
                times[:t],
                policy.infeasible_solves,
                aborted=True,
                error=str(e),
            )
        z = np.concatenate([x, u])
        violations[t] = constraints.H @ z > 1.0
        costs[t] = x @ perf.Q_c @ x + u @ perf.R_c @ u
        x = truth.advance(x, u, rng)
    return RolloutMetrics(costs, violations, times, policy.infeasible_solves)


def monte_carlo_closedloop(
    truth: TruthSystem,
    make_policy: Callable[[], Policy],
    constraints: ConstraintSpec,
    perf: PerformanceSpec,
    n_runs: int,
    steps: int,
    seed: int,
    threads: Optional[int] = None,
) -> MonteCarloSummary:
    """Aggregate independent closed-loop rollouts, one random stream per run.

    Aborted runs count in `aborted` and are left out of the cost and
    violation statistics.
    """
    if n_runs < 1 or steps < 1:
        raise ModelValidationError("n_runs and steps must be positive")
    streams = np.random.SeedSequence(seed).spawn(n_runs)

    def run(ss: np.random.SeedSequence) -> RolloutMetrics:
        return rollout(
            truth,
            make_policy(),
            constraints,
            perf,
            steps,
            np.random.default_rng(ss),
        )

    results = parallel_map(run, streams, threads)
    complete = [r for r in results if not r.aborted]
    costs = [r.cost for r in complete]
    n = len(complete)
    if n:
        mean = math.fsum(costs) / n
        var = math.fsum((c - mean) ** 2 for c in costs) / max(1, n - 1)
        rate = np.mean([r.violations for r in complete], axis=0)
        run_rate = float(np.mean([r.violations.any() for r in complete]))
        solve = math.fsum(float(r.solve_times.mean()) for r in complete) / n
    else:
        mean, var = float("nan"), float("nan")
        rate = np.zeros((steps, constraints.r))
        run_rate, solve = float("nan"), float("nan")
    summary = MonteCarloSummary(
        runs=n_runs,
        aborted=n_runs - n,
        mean_cost=mean,
        cost_stderr=math.sqrt(var / n) if n else float("nan"),
        violation_rate=rate,
        run_violation_rate=run_rate,
        mean_solve_time=solve,
        infeasible_solves=sum(r.infeasible_solves for r in results),
        per_run=results,
    )
    _log.info(
        f"Monte Carlo: {n} of {n_runs} runs complete, mean cost {mean:.4g}, max violation {summary.max_violation:.3f}"
    )
    return summary


# SCENARIOS


@dataclass(frozen=True, eq=False)
class Scenario:
    """A closed-loop experiment: the true plant, its constraints and run counts."""

    truth: TruthSystem
    constraints: ConstraintSpec
    perf: PerformanceSpec
    runs: int = 500
    steps: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.runs < 1 or self.steps < 1:
            raise ModelValidationError("runs and steps must be positive")
        check_shape(
            "H",
            self.constraints.H,
            (None, self.truth.n_x + self.truth.n_u),
        )


def msd_scenario(
    truth: TruthSystem,
    runs: int = 500,
    steps: int = 100,
    seed: int = 0,
    x0_position: float = -0.5,
) -> Scenario:
    """Return the constrained regulation task on a chain started at rest, displaced by `x0_position`."""
    n = truth.n_u
    x0_mean = np.concatenate([np.full(n, x0_position), np.zeros(n)])
    truth = replace(truth, x0_mean=x0_mean)
    return Scenario(
        truth=truth,
        constraints=msd_constraints(n),
        perf=msd_performance(truth),
        runs=runs,
        steps=steps,
        seed=seed,
    )


# LOGGED RUNS


@dataclass(frozen=True, eq=False)
class StepRecord:
    t: int
    u: np.ndarray
    nu: np.ndarray
    y: np.ndarray
    alpha: float
    objective: float
    status: str
    solve_time: float


def simulate_mpc(
    truth: TruthSystem,
    design: MpcDesign,
    steps: int,
    rng: np.random.Generator,
    mode: str = "soc",
) -> List[StepRecord]:
    """Run the receding-horizon controller against `truth`, recording every step.

    An infeasible first step raises `InfeasibleStartError`.
    """
    mpc = OnlineMpc(design, mode)
    state = initial_state(design)
    records = []
    x = truth.initial(rng)
    for t in range(steps):
        y = truth.measure(x, rng)
        start = time.perf_counter()
        u, solution, state = mpc.step(state, y)
        records.append(
            StepRecord(
                t=t,
                u=u,
                nu=solution.nu[0].copy(),
                y=y,
                alpha=float(solution.alpha[0]),
                objective=solution.objective,
                status=solution.status,
                solve_time=time.perf_counter() - start,
            )
        )
        x = truth.advance(x, u, rng)
    if mpc.infeasible_solves:
        _log.warning(
            f"{mpc.infeasible_solves} of {steps} steps fell back to the shifted plan"
        )
    return records
