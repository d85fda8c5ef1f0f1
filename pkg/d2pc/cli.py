# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Identify a linear system from data and control it with a stochastic MPC.

The offline stages (identify, uq, synth, design) and the online stage (run)
hand their results over as JSON and CSV artifacts in the output directory;
`eval` runs Monte Carlo closed-loop experiments and `demo-msd` chains every
stage on a randomly drawn mass-spring-damper chain.

Exit codes: 0 on success, 1 on invalid inputs or numerical failures
(including missing input files), 2 when a conic solver fails, and the
`sysexits.h` codes EX_USAGE and EX_OSERR for argument and write errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from functools import wraps
from os import EX_OK, EX_OSERR
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    NoReturn,
    Optional,
    Tuple,
    cast,
)

import numpy as np

from d2pc.lib import artifacts
from d2pc.lib.common import (
    BASE_PARSER,
    VERSION_FORMAT_STRING,
    ExecContext,
    setup_cli,
)
from d2pc.lib.gem import run_gem
from d2pc.lib.lfr import build_open_lfr, make_channel
from d2pc.lib.model import StructuredModel, ThetaEstimate
from d2pc.lib.mpcdesign import MpcDesign, design_mpc
from d2pc.lib.report import render
from d2pc.lib.sim import (
    LinearPolicy,
    MonteCarloSummary,
    Policy,
    build_msd_chain,
    coverage_experiment,
    generate_data,
    monte_carlo_closedloop,
    mpc_policy_factory,
    msd_scenario,
    simulate_mpc,
    theta_from_truth,
)
from d2pc.lib.smoother import one_step_prediction_error
from d2pc.lib.synth import (
    RobustController,
    closed_loop_of,
    dk_iterate,
    nominal_lqg,
    verify_controller,
)
from d2pc.lib.uq import (
    FD_SCHEMES,
    UncertaintyEllipsoid,
    confidence_ellipsoid,
    observed_information,
)
from d2pc.lib.validation import (
    ModelValidationError,
    NumericalError,
    SolverError,
    list_of,
    validate_nonnegative_int,
    validate_positive_int,
    validate_probability,
)

if TYPE_CHECKING:
    from typing_extensions import Final

PROGRAM_NAME: Final = "d2pc"

EXIT_INVALID: Final = 1
EXIT_SOLVER: Final = 2

COVERAGE_DELTAS: Final = (0.8, 0.9, 0.95)
DEMO_INPUT_VARIANCE: Final = 4.0
POLICIES: Final = ("mpc", "robust", "nominal")


def _get_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        PROGRAM_NAME,
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    # Common flags live on the subcommands, where they can be given after
    # the subcommand name.
    parser.add_argument(
        "--version", action="version", version=VERSION_FORMAT_STRING
    )
    subparsers = parser.add_subparsers(
        dest="command", metavar="COMMAND", required=True
    )

    def add(name: str, help: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name, help=help, description=help, parents=[BASE_PARSER]
        )

    def inputs(sub: argparse.ArgumentParser, *names: str) -> None:
        for name in names:
            sub.add_argument(
                f"--{name}",
                metavar="PATH",
                help=f"read the {name} artifact from PATH (default: in the output directory)",
            )

    identify = add("identify", "estimate the model parameters from data")
    inputs(identify, "model", "data")
    identify.add_argument(
        "--max-iters",
        type=validate_positive_int,
        metavar="N",
        help="stop after N iterations",
    )

    uq = add("uq", "build the parameter confidence ellipsoid")
    inputs(uq, "model", "data", "theta")
    uq.add_argument(
        "--scheme",
        choices=FD_SCHEMES,
        help="finite-difference scheme of the information matrix",
    )

    synth = add("synth", "synthesize a robust output-feedback controller")
    inputs(synth, "model", "theta", "ellipsoid")
    synth.add_argument(
        "--multiplier",
        choices=("full", "scalar", "none"),
        help="uncertainty description; 'none' gives the nominal LQG controller",
    )
    synth.add_argument(
        "--verify-samples",
        type=validate_nonnegative_int,
        default=200,
        metavar="N",
        help="check the certificate on N sampled parameters",
    )

    design = add("design", "compute the predictive controller's offline data")
    inputs(design, "model", "theta", "ellipsoid", "controller")
    design.add_argument(
        "--nominal",
        action="store_true",
        help="ignore the parameter uncertainty",
    )
    design.add_argument(
        "--horizon",
        type=validate_positive_int,
        metavar="N",
        help="prediction horizon",
    )

    run = add("run", "run the predictive controller once on a scenario")
    inputs(run, "design", "scenario")
    run.add_argument(
        "--steps",
        type=validate_positive_int,
        metavar="N",
        help="closed-loop steps (default: from the scenario)",
    )

    evaluate = add("eval", "evaluate a controller by Monte Carlo simulation")
    inputs(evaluate, "scenario", "design", "controller")
    evaluate.add_argument(
        "--policy",
        choices=POLICIES,
        default="mpc",
        help="policy to evaluate; 'nominal' expects a nominal design",
    )
    evaluate.add_argument(
        "--runs",
        type=validate_positive_int,
        metavar="N",
        help="number of rollouts (default: from the scenario)",
    )
    evaluate.add_argument(
        "--steps",
        type=validate_positive_int,
        metavar="N",
        help="steps per rollout (default: from the scenario)",
    )
    evaluate.add_argument(
        "--resolve-every-run",
        action="store_false",
        dest="reuse_plan",
        help="solve the online problem in every rollout instead of replaying one plan",
    )

    demo = add("demo-msd", "run every stage on a mass-spring-damper chain")
    demo.add_argument(
        "--masses",
        type=validate_positive_int,
        default=2,
        metavar="N",
        help="number of masses",
    )
    demo.add_argument(
        "--runs",
        type=validate_positive_int,
        metavar="N",
        help="Monte Carlo rollouts per policy",
    )
    demo.add_argument(
        "--steps",
        type=validate_positive_int,
        metavar="N",
        help="steps per rollout",
    )
    demo.add_argument(
        "--samples",
        type=validate_positive_int,
        default=500,
        metavar="T",
        help="length of the identification experiment",
    )
    demo.add_argument(
        "--coverage-reps",
        type=validate_nonnegative_int,
        default=0,
        metavar="N",
        help="repeat the identification N times to measure ellipsoid coverage",
    )
    demo.add_argument(
        "--coverage-deltas",
        type=list_of(validate_probability),
        default=list(COVERAGE_DELTAS),
        metavar="D1,D2,...",
        help="confidence levels of the coverage experiment",
    )
    demo.add_argument(
        "--skip-lmi",
        action="store_true",
        help="do not evaluate the (slow) LMI tube formulation",
    )
    return parser


class _Context(ExecContext):
    """Data holder for the selected subcommand."""

    def __init__(self) -> None:
        super().__init__()
        self.command: str = ""
        self.model: Optional[str] = None
        self.data: Optional[str] = None
        self.theta: Optional[str] = None
        self.ellipsoid: Optional[str] = None
        self.controller: Optional[str] = None
        self.design: Optional[str] = None
        self.scenario: Optional[str] = None
        self.max_iters: Optional[int] = None
        self.scheme: Optional[str] = None
        self.multiplier: Optional[str] = None
        self.verify_samples: int = 200
        self.nominal: bool = False
        self.horizon: Optional[int] = None
        self.steps: Optional[int] = None
        self.runs: Optional[int] = None
        self.policy: str = "mpc"
        self.reuse_plan: bool = True
        self.masses: int = 2
        self.samples: int = 500
        self.coverage_reps: int = 0
        self.coverage_deltas: List[float] = list(COVERAGE_DELTAS)
        self.skip_lmi: bool = False


def _resolve_config(ctx: _Context) -> artifacts.PipelineConfig:
    """Return the configuration with explicit flags applied on top."""
    config = (
        artifacts.load_config(ctx.config)
        if ctx.config is not None
        else artifacts.PipelineConfig()
    )
    overrides: Dict[str, Any] = {
        key: getattr(ctx, key)
        for key in ("seed", "delta", "mode", "outdir", "multiplier")
        if getattr(ctx, key, None) is not None
    }
    if ctx.max_iters is not None:
        overrides["gem"] = replace(config.gem, max_iters=ctx.max_iters)
    if ctx.scheme is not None:
        overrides["fd_scheme"] = ctx.scheme
    if ctx.horizon is not None:
        overrides["horizon"] = ctx.horizon
    return replace(config, **overrides)


def _input(
    ctx: _Context,
    config: artifacts.PipelineConfig,
    name: str,
    filename: str,
) -> str:
    given = getattr(ctx, name, None) or getattr(config, name, None)
    return str(given) if given else os.path.join(config.outdir, filename)


def _output(config: artifacts.PipelineConfig, filename: str) -> str:
    os.makedirs(config.outdir, exist_ok=True)
    return os.path.join(config.outdir, filename)


def _fail(
    log: logging.Logger, e: BaseException, code: int, json_errors: bool
) -> NoReturn:
    log.critical(f"{e}")
    if json_errors:
        error = {"kind": type(e).__name__, "message": str(e), "exit_code": code}
        print(json.dumps({"error": error}, sort_keys=True))
    sys.exit(code)


@contextmanager
def _handle_errors(log: logging.Logger, json_errors: bool) -> Iterator[None]:
    try:
        yield
    except AssertionError:
        # Don't fail silently.
        raise
    except SolverError as e:
        _fail(log, e, EXIT_SOLVER, json_errors)
    except (ModelValidationError, NumericalError) as e:
        _fail(log, e, EXIT_INVALID, json_errors)
    except OSError as e:
        # Don't delete tempfiles to allow for inspection on write errors.
        _fail(log, e, EX_OSERR, json_errors)


# OFFLINE STAGES


def _load_estimate(
    ctx: _Context, config: artifacts.PipelineConfig
) -> Tuple[StructuredModel, ThetaEstimate]:
    model = artifacts.load_model(_input(ctx, config, "model", "model.json"))
    theta = artifacts.load_theta(
        _input(ctx, config, "theta", "theta.json"), model
    )
    return model, theta


def _identify(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    model = artifacts.load_model(_input(ctx, config, "model", "model.json"))
    data = artifacts.read_iodata(_input(ctx, config, "data", "data.csv"))
    theta, trace = run_gem(model, data, config=config.gem)
    if not trace.is_monotone():
        log.warning("log-likelihood trace is not monotone")
    artifacts.dump_theta(theta, _output(config, "theta.json"))
    artifacts.write_gem_trace(trace, _output(config, "gem_trace.csv"))
    return EX_OK


def _uq(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    model, theta = _load_estimate(ctx, config)
    data = artifacts.read_iodata(_input(ctx, config, "data", "data.csv"))
    H = observed_information(model, theta, data, scheme=config.fd_scheme)
    ellipsoid = confidence_ellipsoid(theta.vartheta, H, config.delta)
    log.info(f"confidence ellipsoid at delta = {config.delta} built")
    artifacts.dump_ellipsoid(ellipsoid, _output(config, "ellipsoid.json"))
    return EX_OK


def _synthesize(
    model: StructuredModel,
    theta: ThetaEstimate,
    ellipsoid: UncertaintyEllipsoid,
    config: artifacts.PipelineConfig,
    multiplier: str,
) -> RobustController:
    open_lfr = build_open_lfr(model, ellipsoid)
    perf = config.performance(model)
    if multiplier == "none":
        return nominal_lqg(open_lfr, theta.Q, theta.R, perf)
    channel = make_channel(open_lfr, ellipsoid, multiplier)
    return dk_iterate(open_lfr, channel, perf, theta.Q, theta.R)


def _synth(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    model, theta = _load_estimate(ctx, config)
    ellipsoid = artifacts.load_ellipsoid(
        _input(ctx, config, "ellipsoid", "ellipsoid.json")
    )
    controller = _synthesize(model, theta, ellipsoid, config, config.multiplier)
    if controller.certified and ctx.verify_samples:
        open_lfr = build_open_lfr(model, ellipsoid)
        clfr = closed_loop_of(
            controller, open_lfr, theta.Q, theta.R, config.performance(model)
        )
        report = verify_controller(
            controller,
            open_lfr,
            clfr,
            ellipsoid,
            np.random.default_rng(config.seed),
            n_samples=ctx.verify_samples,
        )
        if report.ok:
            log.info(
                f"certificate holds on {report.samples} sampled parameters"
            )
    artifacts.dump_controller(controller, _output(config, "controller.json"))
    return EX_OK


def _design(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    if config.constraints is None:
        raise ModelValidationError(
            "no constraints configured; set 'constraints' in the configuration file"
        )
    model, theta = _load_estimate(ctx, config)
    ellipsoid = artifacts.load_ellipsoid(
        _input(ctx, config, "ellipsoid", "ellipsoid.json")
    )
    controller = artifacts.load_controller(
        _input(ctx, config, "controller", "controller.json")
    )
    mu_x0, Sigma_x0 = config.initial_moments(model.n_x)
    design = design_mpc(
        build_open_lfr(model, ellipsoid),
        controller,
        None if ctx.nominal else ellipsoid,
        theta.Q,
        theta.R,
        config.performance(model),
        config.constraints,
        mu_x0,
        Sigma_x0,
        channel_kind="scalar" if config.multiplier == "scalar" else "full",
        N=config.N,
        horizon=config.horizon,
        rho_grid=config.rho_grid,
    )
    name = "design_nominal.json" if ctx.nominal else "design.json"
    artifacts.dump_design(design, _output(config, name))
    return EX_OK


# ONLINE STAGE AND EVALUATION


def _run(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    design = artifacts.load_design(_input(ctx, config, "design", "design.json"))
    scenario = artifacts.load_scenario(
        _input(ctx, config, "scenario", "scenario.json")
    )
    records = simulate_mpc(
        scenario.truth,
        design,
        ctx.steps or scenario.steps,
        np.random.default_rng(config.seed),
        config.mode,
    )
    artifacts.write_run_log(records, _output(config, "run_log.csv"))
    return EX_OK


def _policy_factory(
    policy: str,
    steps: int,
    mode: str,
    reuse_plan: bool,
    design: Optional[MpcDesign] = None,
    controller: Optional[RobustController] = None,
) -> Tuple[Callable[[], Policy], Optional[float]]:
    if policy == "robust":
        assert controller is not None
        return (lambda: LinearPolicy.from_controller(controller)), None
    assert design is not None
    if policy == "nominal" and not design.nominal:
        raise ModelValidationError(
            "policy 'nominal' needs a design made with --nominal"
        )
    make, solve_time = mpc_policy_factory(design, steps, mode, reuse_plan)
    return make, None if math.isnan(solve_time) else solve_time


def _control_row(
    name: str,
    summary: MonteCarloSummary,
    solve_time: Optional[float],
    reference_cost: Optional[float] = None,
) -> Dict[str, Any]:
    cost = summary.mean_cost
    if reference_cost:
        cost /= reference_cost
    return {
        "name": name,
        "cost": cost,
        "time": solve_time if solve_time is not None else summary.mean_solve_time,
        "violation": 100.0 * summary.max_violation,
        "run_violation": 100.0 * summary.run_violation_rate,
        "aborted": summary.aborted,
    }


def _eval(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    scenario = artifacts.load_scenario(
        _input(ctx, config, "scenario", "scenario.json")
    )
    runs = ctx.runs or scenario.runs
    steps = ctx.steps or scenario.steps
    seed = ctx.seed if ctx.seed is not None else scenario.seed
    design = controller = None
    if ctx.policy == "robust":
        controller = artifacts.load_controller(
            _input(ctx, config, "controller", "controller.json")
        )
    else:
        default = (
            "design_nominal.json" if ctx.policy == "nominal" else "design.json"
        )
        design = artifacts.load_design(_input(ctx, config, "design", default))
    make, solve_time = _policy_factory(
        ctx.policy,
        steps,
        config.mode,
        ctx.reuse_plan,
        design=design,
        controller=controller,
    )
    summary = monte_carlo_closedloop(
        scenario.truth,
        make,
        scenario.constraints,
        scenario.perf,
        runs,
        steps,
        seed,
    )
    artifacts.dump_summary(
        summary, ctx.policy, _output(config, f"metrics_{ctx.policy}.json")
    )
    artifacts.write_monte_carlo_runs(
        summary, _output(config, f"runs_{ctx.policy}.csv")
    )
    render(
        "summary.in",
        sys.stdout,
        title=f"Evaluation of policy '{ctx.policy}'",
        identification=None,
        coverage=[],
        synthesis=[],
        control=[_control_row(ctx.policy, summary, solve_time)],
        runs=runs,
        steps=steps,
    )
    return EX_OK


# DEMONSTRATION


def _demo_msd(
    ctx: _Context, config: artifacts.PipelineConfig, log: logging.Logger
) -> int:
    seed = config.seed
    runs = ctx.runs or config.runs
    steps = ctx.steps or config.steps
    truth, model = build_msd_chain(ctx.masses, seed)
    scenario = msd_scenario(truth, runs=runs, steps=steps, seed=seed)
    input_cov = DEMO_INPUT_VARIANCE * np.eye(truth.n_u)
    data = generate_data(truth, ctx.samples, input_cov, seed)
    artifacts.dump_model(model, _output(config, "model.json"))
    artifacts.write_iodata(data, _output(config, "data.csv"))
    artifacts.dump_scenario(scenario, _output(config, "scenario.json"))

    # Identification and uncertainty quantification.
    theta, trace = run_gem(model, data, config=config.gem)
    artifacts.dump_theta(theta, _output(config, "theta.json"))
    artifacts.write_gem_trace(trace, _output(config, "gem_trace.csv"))
    validation = generate_data(truth, ctx.samples, input_cov, seed + 1)
    identification = {
        "iterations": trace.iterations,
        "loglik": trace.logliks[-1],
        "monotone": trace.is_monotone(),
        "prediction_error": one_step_prediction_error(model, theta, validation),
        "true_prediction_error": one_step_prediction_error(
            model, theta_from_truth(model, truth), validation
        ),
    }
    H = observed_information(model, theta, data, scheme=config.fd_scheme)
    ellipsoid = confidence_ellipsoid(theta.vartheta, H, config.delta)
    artifacts.dump_ellipsoid(ellipsoid, _output(config, "ellipsoid.json"))
    coverage: List[Tuple[float, float]] = []
    if ctx.coverage_reps:
        rates = coverage_experiment(
            truth,
            model,
            ctx.samples,
            ctx.coverage_deltas,
            ctx.coverage_reps,
            seed,
            input_cov=input_cov,
            gem_config=config.gem,
        )
        coverage = sorted(rates.items())

    # Controller synthesis.
    open_lfr = build_open_lfr(model, ellipsoid)
    perf = scenario.perf
    lqg = nominal_lqg(open_lfr, theta.Q, theta.R, perf)
    robust = dk_iterate(
        open_lfr,
        make_channel(open_lfr, ellipsoid, "full"),
        perf,
        theta.Q,
        theta.R,
    )
    synthesis = [
        ("nominal LQG", lqg.gamma, 1.0),
        ("full-block multiplier", robust.gamma, robust.gamma / lqg.gamma),
    ]
    try:
        scalar = dk_iterate(
            open_lfr,
            make_channel(open_lfr, ellipsoid, "scalar"),
            perf,
            theta.Q,
            theta.R,
        )
        synthesis.append(
            ("scalar multiplier", scalar.gamma, scalar.gamma / lqg.gamma)
        )
    except SolverError as e:
        log.warning(f"scalar-multiplier synthesis failed ({e})")
    artifacts.dump_controller(robust, _output(config, "controller.json"))

    # Predictive controllers.
    mu_x0, Sigma_x0 = scenario.truth.x0_mean, scenario.truth.x0_cov
    designs: Dict[str, MpcDesign] = {}
    for label, uncertain in (("mpc", True), ("nominal", False)):
        designs[label] = design_mpc(
            open_lfr,
            robust,
            ellipsoid if uncertain else None,
            theta.Q,
            theta.R,
            perf,
            scenario.constraints,
            mu_x0,
            Sigma_x0,
            N=config.N,
            horizon=config.horizon,
            rho_grid=config.rho_grid,
        )
    artifacts.dump_design(designs["mpc"], _output(config, "design.json"))
    artifacts.dump_design(
        designs["nominal"], _output(config, "design_nominal.json")
    )

    # Monte Carlo comparison.
    candidates: List[Tuple[str, str, Optional[MpcDesign], str]] = [
        ("robust", "robust", None, "soc"),
        ("d2pc (soc)", "mpc", designs["mpc"], "soc"),
    ]
    if not ctx.skip_lmi:
        candidates.append(("d2pc (lmi)", "mpc", designs["mpc"], "lmi"))
    candidates.append(("nominal smpc", "nominal", designs["nominal"], "soc"))
    control = []
    reference: Optional[float] = None
    for name, policy, design, mode in candidates:
        make, solve_time = _policy_factory(
            policy,
            steps,
            mode,
            True,
            design=design,
            controller=robust,
        )
        summary = monte_carlo_closedloop(
            truth, make, scenario.constraints, perf, runs, steps, seed
        )
        tag = name.replace(" ", "").replace("(", "_").replace(")", "")
        artifacts.dump_summary(
            summary, name, _output(config, f"metrics_{tag}.json")
        )
        artifacts.write_monte_carlo_runs(
            summary, _output(config, f"runs_{tag}.csv")
        )
        if reference is None:
            reference = summary.mean_cost
        control.append(_control_row(name, summary, solve_time, reference))

    template_vars = dict(
        title=f"Mass-spring-damper chain with {ctx.masses} masses",
        identification=identification,
        coverage=coverage,
        synthesis=synthesis,
        control=control,
        runs=runs,
        steps=steps,
    )
    with artifacts.open_output(_output(config, "summary.txt")) as f:
        render("summary.in", f, **template_vars)
    render("summary.in", sys.stdout, **template_vars)
    return EX_OK


_COMMANDS: Final[
    Dict[
        str,
        Callable[[_Context, artifacts.PipelineConfig, logging.Logger], int],
    ]
] = {
    "identify": _identify,
    "uq": _uq,
    "synth": _synth,
    "design": _design,
    "run": _run,
    "eval": _eval,
    "demo-msd": _demo_msd,
}


_MainFunc = Callable[[Optional[List[str]]], int]


def _convert_system_exit_to_return(main_func: _MainFunc) -> _MainFunc:
    # This helps with testing.
    @wraps(main_func)
    def wrapper(argv: Optional[List[str]] = None) -> int:
        try:
            exit_status = main_func(argv)
        except SystemExit as e:
            exit_status = e.code
        return exit_status

    return wrapper


@_convert_system_exit_to_return
def main(argv: Optional[List[str]] = None) -> int:  # noqa: D103
    # Docstring is copied from the module.
    parsed, log = setup_cli(PROGRAM_NAME, argv, _get_parser(), _Context())
    ctx = cast(_Context, parsed)
    with _handle_errors(log, ctx.json_errors):
        config = _resolve_config(ctx)
        status = _COMMANDS[ctx.command](ctx, config, log)
    return status


main.__doc__ = __doc__
