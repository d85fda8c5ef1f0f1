# SPDX-FileCopyrightText: 2022 d2pc contributors
#
# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from d2pc.lib.model import ThetaEstimate
from d2pc.lib.smoother import (
    IoData,
    kalman_loglik,
    one_step_prediction_error,
    rts_smooth,
    smooth,
    smoothed_states,
)
from d2pc.lib.validation import ModelValidationError


def _batch_loglik(a, b, q, r, m0, P0, data):
    """Log-density of the stacked outputs of a scalar plant, built directly."""
    T = data.T
    u = data.U[:, 0]
    mean = np.empty(T)
    cov = np.empty((T, T))
    for s in range(1, T + 1):
        mean[s - 1] = a ** s * m0 + sum(
            a ** (s - 1 - k) * b * u[k] for k in range(s)
        )
        for t in range(1, T + 1):
            cov[s - 1, t - 1] = a ** (s + t) * P0 + sum(
                a ** (s - 1 - k) * a ** (t - 1 - k) * q
                for k in range(min(s, t))
            )
    cov += r * np.eye(T)
    return multivariate_normal(mean, cov).logpdf(data.Y[:, 0])


def test_loglik_matches_batch_density(scalar_model, scalar_theta, scalar_data):
    short = IoData(Y=scalar_data.Y[:8], U=scalar_data.U[:8])
    loglik, _ = kalman_loglik(scalar_model, scalar_theta, short)
    expected = _batch_loglik(0.8, 0.5, 0.01, 0.01, 0.0, 1e-6, short)
    assert loglik == pytest.approx(expected, rel=1e-6)


def test_loglik_prefers_truth(scalar_model, scalar_theta, scalar_data):
    wrong = ThetaEstimate.from_vectors(
        scalar_model, np.array([0.4, 0.5]), scalar_theta.eta
    )
    true_ll, _ = kalman_loglik(scalar_model, scalar_theta, scalar_data)
    wrong_ll, _ = kalman_loglik(scalar_model, wrong, scalar_data)
    assert true_ll > wrong_ll


def test_smooth_returns_same_loglik(scalar_model, scalar_theta, scalar_data):
    stats, loglik = smooth(scalar_model, scalar_theta, scalar_data)
    assert loglik == pytest.approx(
        kalman_loglik(scalar_model, scalar_theta, scalar_data)[0]
    )
    assert stats.T == scalar_data.T
    stats.check()


def test_smoothed_states_end_at_filter(scalar_model, scalar_theta, scalar_data):
    xs, Ps = smoothed_states(scalar_model, scalar_theta, scalar_data)
    _, moments = kalman_loglik(scalar_model, scalar_theta, scalar_data)
    assert xs.shape == (scalar_data.T + 1, 1)
    assert np.allclose(xs[-1], moments.x_filt[-1])
    assert np.allclose(Ps[-1], moments.P_filt[-1])
    # Smoothing never increases the variance.
    assert np.all(Ps[:, 0, 0] <= moments.P_filt[:, 0, 0] + 1e-12)


def test_second_moments_match_states(scalar_model, scalar_theta, scalar_data):
    stats = rts_smooth(scalar_model, scalar_theta, scalar_data)
    xs, Ps = smoothed_states(scalar_model, scalar_theta, scalar_data)
    expected = np.mean(xs[1:, 0] ** 2 + Ps[1:, 0, 0])
    assert stats.Sigma_x[0, 0] == pytest.approx(expected)
    assert stats.Phi_y[0, 0] == pytest.approx(np.mean(scalar_data.Y ** 2))


def test_prediction_error_near_innovation_variance(
    scalar_model, scalar_theta, scalar_data
):
    error = one_step_prediction_error(scalar_model, scalar_theta, scalar_data)
    assert 0.015 < error < 0.035


def test_iodata_length_mismatch():
    with pytest.raises(ModelValidationError) as excinfo:
        IoData(Y=np.zeros((3, 1)), U=np.zeros((2, 1)))
    assert (
        str(excinfo.value) == "data needs len(Y) = len(U) >= 1, got 3 and 2"
    )


def test_iodata_checked_against_model(msd2):
    _, model = msd2
    with pytest.raises(ModelValidationError):
        IoData(Y=np.zeros((3, 1)), U=np.zeros((3, 2))).check_against(model)
