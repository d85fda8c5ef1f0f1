# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import logging

import numpy as np
import pytest

from d2pc.lib.lfr import build_open_lfr
from d2pc.lib.model import CovBlockSpec, StructuredModel, ThetaEstimate
from d2pc.lib.mpcdesign import ConstraintSpec, design_mpc
from d2pc.lib.sim import TruthSystem, build_msd_chain, generate_data
from d2pc.lib.synth import PerformanceSpec, nominal_lqg
from d2pc.lib.uq import confidence_ellipsoid


@pytest.fixture
def caplog_cli_error(caplog):
    caplog.set_level(logging.CRITICAL)
    return caplog


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A first-order plant x+ = a x + b u + w, y = x + v with unknown (a, b).


@pytest.fixture(scope="session")
def scalar_model():
    return StructuredModel(
        A0=np.zeros((1, 1)),
        B0=np.zeros((1, 1)),
        E=np.eye(1),
        C=np.eye(1),
        J=np.eye(2),
        vartheta0=np.zeros(2),
        q_blocks=(CovBlockSpec.scaled(np.eye(1), np.eye(1)),),
        r_blocks=(CovBlockSpec.scaled(np.eye(1), np.eye(1)),),
        theta_box=(np.full(2, -5.0), np.full(2, 5.0)),
        name="scalar",
    )


@pytest.fixture(scope="session")
def scalar_truth():
    return TruthSystem(
        A=np.array([[0.8]]),
        B=np.array([[0.5]]),
        E=np.eye(1),
        C=np.eye(1),
        Q=np.array([[0.01]]),
        R=np.array([[0.01]]),
        x0_mean=np.zeros(1),
        x0_cov=np.array([[1e-6]]),
    )


@pytest.fixture(scope="session")
def scalar_theta(scalar_model, scalar_truth):
    t = scalar_truth
    return ThetaEstimate.from_matrices(
        scalar_model, np.array([0.8, 0.5]), t.Q, t.R, t.x0_mean, t.x0_cov
    )


@pytest.fixture(scope="session")
def scalar_data(scalar_truth):
    return generate_data(scalar_truth, 400, np.eye(1), seed=3)


@pytest.fixture(scope="session")
def scalar_ellipsoid():
    return confidence_ellipsoid(np.array([0.8, 0.5]), 1e4 * np.eye(2), 0.9)


@pytest.fixture(scope="session")
def scalar_open_lfr(scalar_model, scalar_ellipsoid):
    return build_open_lfr(scalar_model, scalar_ellipsoid)


@pytest.fixture(scope="session")
def scalar_perf():
    return PerformanceSpec.from_weights(np.eye(1), 0.1 * np.eye(1))


@pytest.fixture(scope="session")
def scalar_lqg(scalar_open_lfr, scalar_truth, scalar_perf):
    return nominal_lqg(
        scalar_open_lfr, scalar_truth.Q, scalar_truth.R, scalar_perf
    )


@pytest.fixture(scope="session")
def scalar_constraints():
    return ConstraintSpec.from_bounds(
        1, 1, 0.9, state_bounds=[(0, 1.0)], input_bounds=[(0, 2.0)]
    )


@pytest.fixture(scope="session")
def scalar_design(
    scalar_open_lfr,
    scalar_lqg,
    scalar_ellipsoid,
    scalar_truth,
    scalar_perf,
    scalar_constraints,
):
    return design_mpc(
        scalar_open_lfr,
        scalar_lqg,
        scalar_ellipsoid,
        scalar_truth.Q,
        scalar_truth.R,
        scalar_perf,
        scalar_constraints,
        mu_x0=np.array([0.5]),
        Sigma_x0=1e-6 * np.eye(1),
        N=5,
        horizon=10,
    )


# Two masses.


@pytest.fixture(scope="session")
def msd2():
    return build_msd_chain(2, seed=0)


@pytest.fixture(scope="session")
def msd2_data(msd2):
    truth, _ = msd2
    return generate_data(truth, 300, 4.0 * np.eye(truth.n_u), seed=1)
