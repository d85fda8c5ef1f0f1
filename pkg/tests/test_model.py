# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest

from d2pc.lib.model import (
    CovBlockSpec,
    StructuredModel,
    ThetaEstimate,
    arx_model,
    assemble_covariances,
    assemble_dynamics,
    encode_covariances,
    extract_parameters,
    gamma_matrix,
    project_to_box,
    unvech,
    vech,
)
from d2pc.lib.validation import ModelValidationError


def _kwargs(**overrides):
    kwargs = dict(
        A0=np.zeros((1, 1)),
        B0=np.zeros((1, 1)),
        E=np.eye(1),
        C=np.eye(1),
        J=np.eye(2),
        vartheta0=np.zeros(2),
        q_blocks=(CovBlockSpec.scaled(np.eye(1), np.eye(1)),),
        r_blocks=(CovBlockSpec.scaled(np.eye(1), np.eye(1)),),
    )
    kwargs.update(overrides)
    return kwargs


def test_vech_round_trip():
    M = np.array([[2.0, 0.5], [0.5, 3.0]])
    assert np.allclose(unvech(vech(M), 2), M)


def test_assemble_dynamics_scalar(scalar_model):
    A, B = assemble_dynamics(scalar_model, np.array([0.8, 0.5]))
    assert np.allclose(A, [[0.8]]) and np.allclose(B, [[0.5]])


def test_gamma_matrix_matches_dynamics(msd2):
    truth, model = msd2
    vartheta = extract_parameters(model, truth.A, truth.B)
    A, B = assemble_dynamics(model, vartheta)
    G = gamma_matrix(model, vartheta)
    assert np.allclose(
        np.hstack([model.A0, model.B0]) + model.E @ (G - model.gamma_offset),
        np.hstack([A, B]),
    )


def test_extract_parameters_recovers_truth(msd2):
    truth, model = msd2
    vartheta = extract_parameters(model, truth.A, truth.B)
    A, B = assemble_dynamics(model, vartheta)
    assert np.allclose(A, truth.A) and np.allclose(B, truth.B)


def test_msd_parameter_count(msd2):
    _, model = msd2
    assert model.n_theta == 8


def test_project_to_box(scalar_model):
    clipped = project_to_box(scalar_model, np.array([7.0, -0.3]))
    assert np.allclose(clipped, [5.0, -0.3])


def test_covariance_encoding(scalar_model):
    eta = encode_covariances(
        scalar_model,
        np.array([[0.02]]),
        np.array([[0.03]]),
        np.array([0.1]),
        np.array([[0.5]]),
    )
    Q, R, mean, cov = assemble_covariances(scalar_model, eta)
    assert np.allclose(Q, 0.02) and np.allclose(R, 0.03)
    assert np.allclose(mean, 0.1) and np.allclose(cov, 0.5)


def test_full_block_encoding():
    block = CovBlockSpec.full(np.eye(2))
    M = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert block.n_params == 3
    assert np.allclose(block.assemble(block.encode(M)), M)


def test_covariance_outside_bounds(scalar_model):
    eta = encode_covariances(
        scalar_model,
        np.array([[1e-12]]),
        np.array([[0.01]]),
        np.zeros(1),
        np.eye(1),
    )
    with pytest.raises(ModelValidationError) as excinfo:
        assemble_covariances(scalar_model, eta)
    assert "`Q` has eigenvalues" in str(excinfo.value)


def test_theta_estimate_from_matrices(scalar_theta):
    assert isinstance(scalar_theta, ThetaEstimate)
    assert np.allclose(scalar_theta.A, 0.8) and np.allclose(scalar_theta.Q, 0.01)


def test_rank_deficient_E():
    with pytest.raises(ModelValidationError) as excinfo:
        StructuredModel(**_kwargs(E=np.zeros((1, 1))))
    assert str(excinfo.value) == "`E` must have full column rank"


def test_rank_deficient_C():
    with pytest.raises(ModelValidationError) as excinfo:
        StructuredModel(**_kwargs(C=np.zeros((1, 1))))
    assert str(excinfo.value) == "`C` must have full row rank"


def test_outputs_may_be_fewer_than_states(msd2):
    _, model = msd2
    assert model.C.shape == (2, 4)
    with pytest.raises(ModelValidationError) as excinfo:
        StructuredModel(**_kwargs(C=np.ones((2, 1))))
    assert str(excinfo.value) == "`C` must have full row rank"


def test_rank_deficient_J():
    J = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ModelValidationError) as excinfo:
        StructuredModel(**_kwargs(J=J))
    assert str(excinfo.value) == "`J` must have full column rank"


def test_blocks_must_be_disjoint():
    blocks = (
        CovBlockSpec.full(np.eye(2)),
        CovBlockSpec.scaled(np.array([[1.0, 0.0]]), np.eye(1)),
    )
    with pytest.raises(ModelValidationError):
        StructuredModel(
            **_kwargs(
                A0=np.zeros((2, 2)),
                B0=np.zeros((2, 1)),
                E=np.eye(2),
                C=np.eye(2),
                J=np.eye(6),
                vartheta0=np.zeros(6),
                q_blocks=blocks,
                r_blocks=(CovBlockSpec.full(np.eye(2)),),
            )
        )


def test_block_kind_must_be_known():
    with pytest.raises(ModelValidationError) as excinfo:
        CovBlockSpec(np.eye(1), "diagonal", np.eye(1))
    assert (
        str(excinfo.value)
        == "covariance block kind 'diagonal' must be one of the following: fixed, scaled, full"
    )


def test_arx_dimensions():
    model = arx_model(1, 1, 2)
    assert model.n_x == 3
    assert model.n_theta == 4
