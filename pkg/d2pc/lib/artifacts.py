# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

"""Read and write pipeline artifacts.

Structured artifacts are JSON documents of the form

    {"version": 1, "kind": KIND, "metadata": {...}, "data": {...}}

where only `metadata` (program, package version, creation time) differs
between two runs on identical inputs.  Matrices are nested row-major lists.
Time series are CSV files with a header row.

Every write is atomic: the document goes to a temporary file in the
destination directory, which then replaces the target.  The target `-`
means standard output.
"""
from __future__ import annotations

import csv
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from tempfile import NamedTemporaryFile
from typing import (
    TYPE_CHECKING,
    Any,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    TextIO,
    Tuple,
)

import numpy as np

from d2pc._package import __version__
from d2pc.lib.gem import GemConfig, GemTrace
from d2pc.lib.model import CovBlockSpec, StructuredModel, ThetaEstimate
from d2pc.lib.mpcdesign import (
    DEFAULT_HORIZON,
    DEFAULT_N,
    ConstraintSpec,
    MpcDesign,
)
from d2pc.lib.sim import (
    MonteCarloSummary,
    Scenario,
    StepRecord,
    TruthSystem,
)
from d2pc.lib.smoother import IoData
from d2pc.lib.synth import PerformanceSpec, RobustController
from d2pc.lib.uq import UncertaintyEllipsoid
from d2pc.lib.validation import (
    ModelValidationError,
    validate_mode,
)

if TYPE_CHECKING:
    from typing_extensions import Final

ARTIFACT_VERSION: Final = 1
_FLOAT_FORMAT: Final = ".17g"

Document = Dict[str, Any]


# PLUMBING


def _matrix(M: Optional[np.ndarray]) -> Any:
    return None if M is None else np.asarray(M, float).tolist()


def _array(data: Document, key: str, ndim: Optional[int] = None) -> np.ndarray:
    try:
        value = np.asarray(data[key], dtype=float)
    except KeyError:
        raise ModelValidationError(f"artifact is missing '{key}'") from None
    except (TypeError, ValueError):
        raise ModelValidationError(
            f"artifact entry '{key}' is not a numeric array"
        ) from None
    if ndim == 2 and value.size == 0:
        value = value.reshape(0, 0)
    if ndim is not None and value.ndim != ndim:
        raise ModelValidationError(
            f"artifact entry '{key}' must have {ndim} dimension(s), got {value.ndim}"
        )
    return value


def _optional_array(data: Document, key: str) -> Optional[np.ndarray]:
    return None if data.get(key) is None else _array(data, key)


def _field(data: Document, key: str) -> Any:
    try:
        return data[key]
    except KeyError:
        raise ModelValidationError(f"artifact is missing '{key}'") from None


def metadata(program: str = "d2pc") -> Document:
    return {
        "program": program,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def make_document(kind: str, data: Document, program: str = "d2pc") -> Document:
    return {
        "version": ARTIFACT_VERSION,
        "kind": kind,
        "metadata": metadata(program),
        "data": data,
    }


@contextmanager
def open_output(path: str, prefix: str = "d2pc") -> Iterator[TextIO]:
    """Yield a text stream whose contents atomically replace `path` on success.

    On failure, the temporary file is left behind for inspection.
    """
    if path == "-":
        # Don't close stdout.
        yield sys.stdout
        return
    directory = os.path.dirname(os.path.abspath(path))
    with NamedTemporaryFile(
        mode="w",
        delete=False,
        prefix=f"{os.path.basename(path)}.",
        suffix=f".{prefix}.tmp",
        dir=directory,
        newline="",
        encoding="utf-8",
    ) as f:
        yield f
        f.flush()
        os.fsync(f.fileno())
    os.replace(f.name, path)


@contextmanager
def open_input(path: str) -> Iterator[TextIO]:
    """Open `path` for reading; a missing file is a validation error naming it."""
    try:
        f = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ModelValidationError(
            f"input file '{path}' does not exist"
        ) from None
    except IsADirectoryError:
        raise ModelValidationError(
            f"input file '{path}' is a directory"
        ) from None
    with f:
        yield f


def write_document(path: str, doc: Document) -> None:
    with open_output(path) as f:
        json.dump(doc, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def read_document(path: str, kind: str) -> Document:
    """Return the `data` object of the artifact at `path` after checking its header."""
    with open_input(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelValidationError(
                f"'{path}' is not valid JSON ({e})"
            ) from None
    if not isinstance(doc, dict):
        raise ModelValidationError(f"'{path}' is not an artifact document")
    if doc.get("version") != ARTIFACT_VERSION:
        raise ModelValidationError(
            f"'{path}' has unsupported artifact version {doc.get('version')!r}"
        )
    if doc.get("kind") != kind:
        raise ModelValidationError(
            f"'{path}' holds a '{doc.get('kind')}' artifact, expected '{kind}'"
        )
    data = doc.get("data")
    if not isinstance(data, dict):
        raise ModelValidationError(f"'{path}' has no data object")
    return data


def _load(path: str, kind: str, decode: Any, *args: Any) -> Any:
    data = read_document(path, kind)
    try:
        return decode(data, *args)
    except ModelValidationError as e:
        raise ModelValidationError(f"{path}: {e}") from None


# MODEL AND ESTIMATES


def _encode_block(block: CovBlockSpec) -> Document:
    return {
        "kind": block.kind,
        "projector": _matrix(block.projector),
        "base": _matrix(block.base),
    }


def _decode_block(data: Document) -> CovBlockSpec:
    return CovBlockSpec(
        projector=_array(data, "projector", 2),
        kind=_field(data, "kind"),
        base=_optional_array(data, "base"),
    )


def encode_model(model: StructuredModel) -> Document:
    assert model.theta_box is not None
    return {
        "name": model.name,
        "A0": _matrix(model.A0),
        "B0": _matrix(model.B0),
        "E": _matrix(model.E),
        "C": _matrix(model.C),
        "J": _matrix(model.J),
        "vartheta0": _matrix(model.vartheta0),
        "q_blocks": [_encode_block(b) for b in model.q_blocks],
        "r_blocks": [_encode_block(b) for b in model.r_blocks],
        "theta_box": [_matrix(model.theta_box[0]), _matrix(model.theta_box[1])],
        "x0_box": model.x0_box,
        "cov_eig_bounds": list(model.cov_eig_bounds),
    }


def decode_model(data: Document) -> StructuredModel:
    low, high = _field(data, "theta_box")
    eig_low, eig_high = _field(data, "cov_eig_bounds")
    return StructuredModel(
        A0=_array(data, "A0", 2),
        B0=_array(data, "B0", 2),
        E=_array(data, "E", 2),
        C=_array(data, "C", 2),
        J=_array(data, "J", 2),
        vartheta0=_array(data, "vartheta0", 1),
        q_blocks=tuple(_decode_block(b) for b in _field(data, "q_blocks")),
        r_blocks=tuple(_decode_block(b) for b in _field(data, "r_blocks")),
        theta_box=(np.asarray(low, float), np.asarray(high, float)),
        x0_box=float(_field(data, "x0_box")),
        cov_eig_bounds=(float(eig_low), float(eig_high)),
        name=str(data.get("name", "model")),
    )


def dump_model(model: StructuredModel, path: str) -> None:
    write_document(path, make_document("model", encode_model(model)))


def load_model(path: str) -> StructuredModel:
    model: StructuredModel = _load(path, "model", decode_model)
    return model


def encode_theta(theta: ThetaEstimate) -> Document:
    # The matrices are for readers; loading rebuilds them from the vectors.
    return {
        "vartheta": _matrix(theta.vartheta),
        "eta": _matrix(theta.eta),
        "A": _matrix(theta.A),
        "B": _matrix(theta.B),
        "Q": _matrix(theta.Q),
        "R": _matrix(theta.R),
        "x0_mean": _matrix(theta.x0_mean),
        "x0_cov": _matrix(theta.x0_cov),
    }


def decode_theta(data: Document, model: StructuredModel) -> ThetaEstimate:
    return ThetaEstimate.from_vectors(
        model, _array(data, "vartheta", 1), _array(data, "eta", 1)
    )


def dump_theta(theta: ThetaEstimate, path: str) -> None:
    write_document(path, make_document("theta", encode_theta(theta)))


def load_theta(path: str, model: StructuredModel) -> ThetaEstimate:
    theta: ThetaEstimate = _load(path, "theta", decode_theta, model)
    return theta


def encode_ellipsoid(ellipsoid: UncertaintyEllipsoid) -> Document:
    return {
        "vartheta_hat": _matrix(ellipsoid.vartheta_hat),
        "Sigma_vartheta": _matrix(ellipsoid.Sigma_vartheta),
        "delta": ellipsoid.delta,
        "Sigma_vartheta_delta": _matrix(ellipsoid.Sigma_vartheta_delta),
    }


def decode_ellipsoid(data: Document) -> UncertaintyEllipsoid:
    return UncertaintyEllipsoid(
        vartheta_hat=_array(data, "vartheta_hat", 1),
        Sigma_vartheta=_array(data, "Sigma_vartheta", 2),
        delta=float(_field(data, "delta")),
        Sigma_vartheta_delta=_array(data, "Sigma_vartheta_delta", 2),
    )


def dump_ellipsoid(ellipsoid: UncertaintyEllipsoid, path: str) -> None:
    write_document(path, make_document("ellipsoid", encode_ellipsoid(ellipsoid)))


def load_ellipsoid(path: str) -> UncertaintyEllipsoid:
    ellipsoid: UncertaintyEllipsoid = _load(path, "ellipsoid", decode_ellipsoid)
    return ellipsoid


# CONTROLLERS AND DESIGNS


def encode_controller(controller: RobustController) -> Document:
    return {
        "A_c": _matrix(controller.A_c),
        "K": _matrix(controller.K),
        "L": _matrix(controller.L),
        "gamma": controller.gamma,
        "Lambda": _matrix(controller.Lambda),
        "X_cal": _matrix(controller.X_cal),
        "certified": controller.certified,
        "multiplier": controller.multiplier,
        "gamma_trace": list(controller.gamma_trace),
    }


def decode_controller(data: Document) -> RobustController:
    return RobustController(
        A_c=_array(data, "A_c", 2),
        K=_array(data, "K", 2),
        L=_array(data, "L", 2),
        gamma=float(_field(data, "gamma")),
        Lambda=_optional_array(data, "Lambda"),
        X_cal=_optional_array(data, "X_cal"),
        certified=bool(data.get("certified", False)),
        multiplier=str(data.get("multiplier", "none")),
        gamma_trace=[float(g) for g in data.get("gamma_trace", [])],
    )


def dump_controller(controller: RobustController, path: str) -> None:
    write_document(path, make_document("controller", encode_controller(controller)))


def load_controller(path: str) -> RobustController:
    controller: RobustController = _load(path, "controller", decode_controller)
    return controller


def encode_constraints(constraints: ConstraintSpec) -> Document:
    return {"H": _matrix(constraints.H), "p": _matrix(constraints.p)}


def decode_constraints(data: Document) -> ConstraintSpec:
    return ConstraintSpec(H=_array(data, "H", 2), p=_array(data, "p", 1))


def encode_performance(perf: PerformanceSpec) -> Document:
    return {"C_eps": _matrix(perf.C_eps), "D_eps": _matrix(perf.D_eps)}


def decode_performance(data: Document) -> PerformanceSpec:
    return PerformanceSpec(
        C_eps=_array(data, "C_eps", 2), D_eps=_array(data, "D_eps", 2)
    )


_DESIGN_MATRICES: Final = (
    "P",
    "c",
    "f",
    "Sigma_J_bar",
    "Sigma_J_half",
    "S_xi_c",
    "A_cal_hat",
    "B_nu_hat",
    "A_c",
    "K",
    "L",
    "Q_c",
    "R_c",
    "mu_xi0",
)


def encode_design(design: MpcDesign) -> Document:
    data: Document = {
        name: _matrix(getattr(design, name)) for name in _DESIGN_MATRICES
    }
    data.update(
        rho=design.rho,
        c_lower=design.c_lower,
        sigma_bar=design.sigma_bar,
        Sigma_bar=[_matrix(S) for S in design.Sigma_bar],
        constraints=encode_constraints(design.constraints),
        horizon=design.horizon,
        nominal=design.nominal,
    )
    return data


def decode_design(data: Document) -> MpcDesign:
    matrices = {name: _array(data, name) for name in _DESIGN_MATRICES}
    matrices["f"] = matrices["f"].reshape(-1)
    matrices["mu_xi0"] = matrices["mu_xi0"].reshape(-1)
    Sigma_bar = [np.asarray(S, float) for S in _field(data, "Sigma_bar")]
    if not Sigma_bar:
        raise ModelValidationError("design holds no covariance bounds")
    return MpcDesign(
        rho=float(_field(data, "rho")),
        c_lower=float(_field(data, "c_lower")),
        sigma_bar=float(_field(data, "sigma_bar")),
        Sigma_bar=Sigma_bar,
        constraints=decode_constraints(_field(data, "constraints")),
        horizon=int(data.get("horizon", DEFAULT_HORIZON)),
        nominal=bool(data.get("nominal", False)),
        **matrices,
    )


def dump_design(design: MpcDesign, path: str) -> None:
    write_document(path, make_document("design", encode_design(design)))


def load_design(path: str) -> MpcDesign:
    design: MpcDesign = _load(path, "design", decode_design)
    return design


# SCENARIOS


def encode_truth(truth: TruthSystem) -> Document:
    return {
        name: _matrix(getattr(truth, name))
        for name in ("A", "B", "E", "C", "Q", "R", "x0_mean", "x0_cov")
    }


def decode_truth(data: Document) -> TruthSystem:
    return TruthSystem(
        A=_array(data, "A", 2),
        B=_array(data, "B", 2),
        E=_array(data, "E", 2),
        C=_array(data, "C", 2),
        Q=_array(data, "Q", 2),
        R=_array(data, "R", 2),
        x0_mean=_array(data, "x0_mean", 1),
        x0_cov=_array(data, "x0_cov", 2),
    )


def encode_scenario(scenario: Scenario) -> Document:
    return {
        "truth": encode_truth(scenario.truth),
        "constraints": encode_constraints(scenario.constraints),
        "performance": encode_performance(scenario.perf),
        "runs": scenario.runs,
        "steps": scenario.steps,
        "seed": scenario.seed,
    }


def decode_scenario(data: Document) -> Scenario:
    return Scenario(
        truth=decode_truth(_field(data, "truth")),
        constraints=decode_constraints(_field(data, "constraints")),
        perf=decode_performance(_field(data, "performance")),
        runs=int(data.get("runs", 500)),
        steps=int(data.get("steps", 100)),
        seed=int(data.get("seed", 0)),
    )


def dump_scenario(scenario: Scenario, path: str) -> None:
    write_document(path, make_document("scenario", encode_scenario(scenario)))


def load_scenario(path: str) -> Scenario:
    scenario: Scenario = _load(path, "scenario", decode_scenario)
    return scenario


def encode_summary(summary: MonteCarloSummary, policy: str) -> Document:
    return {
        "policy": policy,
        "runs": summary.runs,
        "aborted": summary.aborted,
        "mean_cost": summary.mean_cost,
        "cost_stderr": summary.cost_stderr,
        "max_violation": summary.max_violation,
        "violation_rate": _matrix(summary.violation_rate),
        "run_violation_rate": summary.run_violation_rate,
        "mean_solve_time": summary.mean_solve_time,
        "infeasible_solves": summary.infeasible_solves,
    }


def dump_summary(
    summary: MonteCarloSummary, policy: str, path: str
) -> None:
    write_document(path, make_document("metrics", encode_summary(summary, policy)))


# CONFIGURATION


@dataclass
class PipelineConfig:
    """Defaults of a pipeline run, overridden by explicit flags.

    Paths are relative to the working directory.  Missing performance
    weights default to Q_c = C^T C and R_c = input_weight^2 I; missing
    initial-state moments to zero mean and 1e-6 I.
    """

    model: Optional[str] = None
    data: Optional[str] = None
    outdir: str = "."
    delta: float = 0.95
    seed: int = 0
    gem: GemConfig = field(default_factory=GemConfig)
    fd_scheme: str = "loglik"
    multiplier: str = "full"
    Q_c: Optional[np.ndarray] = None
    R_c: Optional[np.ndarray] = None
    input_weight: float = 1e-4
    constraints: Optional[ConstraintSpec] = None
    N: int = DEFAULT_N
    horizon: int = DEFAULT_HORIZON
    rho_grid: Optional[List[float]] = None
    mode: str = "soc"
    x0_mean: Optional[np.ndarray] = None
    x0_cov: Optional[np.ndarray] = None
    runs: int = 500
    steps: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ModelValidationError(f"delta {self.delta} must be in (0, 1)")
        validate_mode(self.mode)
        if self.multiplier not in ("full", "scalar", "none"):
            raise ModelValidationError(
                f"multiplier '{self.multiplier}' must be one of the following: full, scalar, none"
            )
        if self.N < 0 or self.horizon < 1:
            raise ModelValidationError(
                "N must be non-negative and the horizon positive"
            )
        if self.runs < 1 or self.steps < 1:
            raise ModelValidationError("runs and steps must be positive")

    def performance(self, model: StructuredModel) -> PerformanceSpec:
        Q_c = model.C.T @ model.C if self.Q_c is None else self.Q_c
        R_c = (
            self.input_weight ** 2 * np.eye(model.n_u)
            if self.R_c is None
            else self.R_c
        )
        return PerformanceSpec.from_weights(Q_c, R_c)

    def initial_moments(self, n_x: int) -> Tuple[np.ndarray, np.ndarray]:
        mean = np.zeros(n_x) if self.x0_mean is None else self.x0_mean
        cov = 1e-6 * np.eye(n_x) if self.x0_cov is None else self.x0_cov
        return np.asarray(mean, float), np.asarray(cov, float)


_CONFIG_KEYS: Final = frozenset(
    (
        "model",
        "data",
        "outdir",
        "delta",
        "seed",
        "gem",
        "fd_scheme",
        "multiplier",
        "Q_c",
        "R_c",
        "input_weight",
        "constraints",
        "N",
        "horizon",
        "rho_grid",
        "mode",
        "x0_mean",
        "x0_cov",
        "runs",
        "steps",
    )
)


def decode_config(data: Document) -> PipelineConfig:
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ModelValidationError(
            f"unknown configuration keys: {', '.join(unknown)}"
        )
    kwargs = dict(data)
    for key in ("delta", "input_weight"):
        if key in kwargs:
            try:
                kwargs[key] = float(kwargs[key])
            except (TypeError, ValueError):
                raise ModelValidationError(
                    f"configuration entry '{key}' is not a number"
                ) from None
    if "gem" in kwargs:
        try:
            kwargs["gem"] = GemConfig(**kwargs["gem"])
        except TypeError as e:
            raise ModelValidationError(f"invalid GEM settings ({e})") from None
    for key in ("Q_c", "R_c", "x0_mean", "x0_cov"):
        if kwargs.get(key) is not None:
            kwargs[key] = _array(kwargs, key)
    if kwargs.get("constraints") is not None:
        kwargs["constraints"] = decode_constraints(kwargs["constraints"])
    if kwargs.get("rho_grid") is not None:
        kwargs["rho_grid"] = [float(r) for r in kwargs["rho_grid"]]
    try:
        return PipelineConfig(**kwargs)
    except TypeError as e:
        raise ModelValidationError(f"invalid configuration ({e})") from None


def encode_config(config: PipelineConfig) -> Document:
    data: Document = {}
    for key in sorted(_CONFIG_KEYS):
        value = getattr(config, key)
        if isinstance(value, np.ndarray):
            value = _matrix(value)
        elif isinstance(value, ConstraintSpec):
            value = encode_constraints(value)
        elif isinstance(value, GemConfig):
            value = asdict(value)
        data[key] = value
    return data


def dump_config(config: PipelineConfig, path: str) -> None:
    write_document(path, make_document("config", encode_config(config)))


def load_config(path: str) -> PipelineConfig:
    """Read a configuration, either a bare JSON object or a `config` artifact."""
    with open_input(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelValidationError(
                f"'{path}' is not valid JSON ({e})"
            ) from None
    if not isinstance(doc, dict):
        raise ModelValidationError(f"'{path}' is not a JSON object")
    if "kind" in doc:
        doc = read_document(path, "config")
    try:
        return decode_config(doc)
    except ModelValidationError as e:
        raise ModelValidationError(f"{path}: {e}") from None


# TIME SERIES


def _fmt(value: float) -> str:
    return format(float(value), _FLOAT_FORMAT)


def write_csv(
    path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]
) -> None:
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row]
            )


def _read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    with open_input(path) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ModelValidationError(f"'{path}' is empty") from None
        return header, [row for row in reader if row]


def write_iodata(data: IoData, path: str) -> None:
    """Write `data` as rows `t, u_t, y_{t+1}` for t = 0..T-1."""
    header = (
        ["t"]
        + [f"u_{i + 1}" for i in range(data.U.shape[1])]
        + [f"y_{i + 1}" for i in range(data.Y.shape[1])]
    )
    rows = [
        [t, *map(float, data.U[t]), *map(float, data.Y[t])]
        for t in range(data.T)
    ]
    write_csv(path, header, rows)


def read_iodata(path: str) -> IoData:
    header, rows = _read_csv(path)
    u_cols = [i for i, name in enumerate(header) if name.startswith("u_")]
    y_cols = [i for i, name in enumerate(header) if name.startswith("y_")]
    if not u_cols or not y_cols:
        raise ModelValidationError(
            f"'{path}' needs u_* and y_* columns, found {', '.join(header)}"
        )
    try:
        values = np.array(
            [[float(v) for v in row] for row in rows], dtype=float
        )
    except ValueError:
        raise ModelValidationError(f"'{path}' holds non-numeric data") from None
    if values.ndim != 2 or values.shape[0] == 0:
        raise ModelValidationError(f"'{path}' holds no samples")
    if values.shape[1] != len(header):
        raise ModelValidationError(f"'{path}' has ragged rows")
    return IoData(Y=values[:, y_cols], U=values[:, u_cols])


def write_gem_trace(trace: GemTrace, path: str) -> None:
    write_csv(
        path,
        ["iteration", "loglik"],
        [[k, float(v)] for k, v in enumerate(trace.logliks)],
    )


def write_monte_carlo_runs(summary: MonteCarloSummary, path: str) -> None:
    r = summary.per_run[0].violations.shape[1] if summary.per_run else 0
    header = (
        ["run", "cost", "steps", "aborted", "infeasible_solves", "violated"]
        + [f"violations_{j + 1}" for j in range(r)]
        + ["mean_solve_time", "error"]
    )
    rows = []
    for k, run in enumerate(summary.per_run):
        counts = run.violations.sum(axis=0) if run.violations.size else [0] * r
        mean_time = (
            float(run.solve_times.mean()) if run.solve_times.size else float("nan")
        )
        rows.append(
            [
                k,
                run.cost,
                run.stage_costs.shape[0],
                int(run.aborted),
                run.infeasible_solves,
                int(run.violations.any()),
                *(int(c) for c in counts),
                mean_time,
                run.error or "",
            ]
        )
    write_csv(path, header, rows)


def write_run_log(records: Sequence[StepRecord], path: str) -> None:
    n_u = records[0].u.shape[0] if records else 0
    n_y = records[0].y.shape[0] if records else 0
    header = (
        ["t"]
        + [f"u_{i + 1}" for i in range(n_u)]
        + [f"nu_{i + 1}" for i in range(n_u)]
        + [f"y_{i + 1}" for i in range(n_y)]
        + ["alpha", "objective", "status", "solve_time"]
    )
    rows = [
        [
            r.t,
            *map(float, r.u),
            *map(float, r.nu),
            *map(float, r.y),
            r.alpha,
            float(r.objective),
            r.status,
            r.solve_time,
        ]
        for r in records
    ]
    write_csv(path, header, rows)
