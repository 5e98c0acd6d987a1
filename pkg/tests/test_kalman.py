"""Tests for the residual-form Kalman filter."""

import numpy as np
import pytest

from conftest import random_model, random_spd
from adjkf.errors import DimensionMismatch
from adjkf.kalman import (
    FilterTrace,
    GaussianState,
    ModelSequence,
    StepModel,
    gain,
    loss,
    predict,
    residual,
    residual_step,
    run_filter,
    run_filter_relinearized,
    trace_to_csv,
    update,
)
from adjkf.linalg import make_rng, sym_inv_sqrt


def scalar_step(F=1.0, H=1.0, Q=0.0, R=1.0, f=0.0, B=0.0, u=0.0):
    return StepModel(
        F=[[F]], B=[[B]], H=[[H]], f=[f], u=[u], Q=[[Q]], R=[[R]]
    )


def test_predict_example():
    state = GaussianState([0.0, 1.0], np.eye(2))
    step = StepModel(
        F=[[1.0, 0.1], [0.0, 1.0]],
        B=np.zeros((2, 1)),
        H=[[1.0, 0.0]],
        f=[0.0, 0.0],
        u=[0.0],
        Q=np.zeros((2, 2)),
        R=[[1.0]],
    )
    out = predict(state, step)
    assert np.allclose(out.x, [0.1, 1.0])
    assert np.allclose(out.P, [[1.01, 0.1], [0.1, 1.0]])


def test_gain_example():
    step = StepModel(
        F=np.eye(2),
        B=np.zeros((2, 1)),
        H=[[1.0, 0.0]],
        f=np.zeros(2),
        u=[0.0],
        Q=np.zeros((2, 2)),
        R=[[1.0]],
    )
    K, S = gain(np.eye(2), step)
    assert np.allclose(S, [[2.0]])
    assert np.allclose(K, [[0.5], [0.0]])


def test_update_scalar_example():
    pred = GaussianState([0.0], [[1.0]])
    posterior, K, S, nu = update(pred, scalar_step(), np.array([2.0]))
    assert posterior.x[0] == pytest.approx(1.0)
    assert posterior.P[0, 0] == pytest.approx(0.5)
    assert K[0, 0] == pytest.approx(0.5)
    assert S[0, 0] == pytest.approx(2.0)
    assert nu[0] == pytest.approx(2.0)


def test_single_step_run_equals_manual_composition():
    model, obs = random_model(seed=5, n_x=3, n_z=2, n_t=1)
    trace = run_filter(model, obs)
    pred = predict(model.initial, model.steps[0])
    posterior, K, S, nu = update(pred, model.steps[0], obs[0])
    assert np.allclose(trace.x_pred[0], pred.x)
    assert np.allclose(trace.P_pred[0], pred.P)
    assert np.allclose(trace.K[0], K)
    assert np.allclose(trace.S[0], S)
    assert np.allclose(trace.innovation[0], nu)
    assert np.allclose(trace.x_post[0], posterior.x)
    assert np.allclose(trace.P_post[0], posterior.P)


def test_zero_noise_exact_tracking():
    # true model, clean observations, no prior or process uncertainty:
    # the filter reproduces the truth to roundoff
    rng = make_rng(9)
    F = np.array([[1.0, 0.1], [0.0, 1.0]])
    step = StepModel(F, [[0.0], [0.5]], [[1.0, 0.0]], [0.0, -0.2], [1.0], np.zeros((2, 2)), [[1.0]])
    x = np.array([0.3, -0.1])
    truth, obs = [], []
    xk = x.copy()
    for _ in range(20):
        xk = step.drift(xk)
        truth.append(xk.copy())
        obs.append(step.H @ xk)
    model = ModelSequence(GaussianState(x, np.zeros((2, 2))), [step] * 20)
    trace = run_filter(model, np.array(obs))
    assert np.max(np.abs(trace.x_post - np.array(truth))) < 1e-12


@pytest.mark.parametrize("seed,n_x,n_z", [(0, 1, 1), (1, 2, 1), (2, 3, 2), (3, 4, 4)])
def test_residual_vanishes_on_own_trace(seed, n_x, n_z):
    model, obs = random_model(seed=seed, n_x=n_x, n_z=n_z, n_t=6)
    trace = run_filter(model, obs)
    r = residual(trace, model, obs)
    assert np.max(np.abs(r)) < 1e-12


def test_residual_unit_diagonal_response():
    # the stacked residual has unit coefficient on its own step's state:
    # shifting x_post[k] shifts r_x[k] by exactly the same amount
    model, obs = random_model(seed=13, n_x=2, n_z=1, n_t=4)
    trace = run_filter(model, obs)
    delta = np.array([0.3, -0.7])
    k = 2
    r_x0, _ = residual_step(
        trace.x_post[k - 1], trace.P_post[k - 1],
        trace.x_post[k], trace.P_post[k], model.steps[k], obs[k],
    )
    r_x1, _ = residual_step(
        trace.x_post[k - 1], trace.P_post[k - 1],
        trace.x_post[k] + delta, trace.P_post[k], model.steps[k], obs[k],
    )
    assert np.allclose(r_x1 - r_x0, delta, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_covariance_update_joseph_equivalence(seed):
    # with the optimal gain, (I-KH) P' == (I-KH) P' (I-KH)^T + K R K^T
    model, obs = random_model(seed=40 + seed, n_x=3, n_z=2, n_t=3)
    trace = run_filter(model, obs)
    for k in range(3):
        step = model.steps[k]
        K = trace.K[k]
        ikh = np.eye(3) - K @ step.H
        joseph = ikh @ trace.P_pred[k] @ ikh.T + K @ step.R @ K.T
        scale = np.linalg.norm(joseph)
        assert np.linalg.norm(trace.P_post[k] - joseph) / scale < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_posterior_covariance_not_larger(seed):
    model, obs = random_model(seed=60 + seed, n_x=3, n_z=2, n_t=4)
    trace = run_filter(model, obs)
    for k in range(4):
        eigs = np.linalg.eigvalsh(trace.P_pred[k] - trace.P_post[k])
        assert eigs.min() > -1e-10


def test_full_trust_limit():
    # huge process noise, fixed R: the gain approaches full observation trust
    step = scalar_step(F=1.0, H=1.0, Q=1e9, R=1.0)
    model = ModelSequence(GaussianState([0.0], [[1.0]]), [step])
    trace = run_filter(model, np.array([[1.0]]))
    assert abs(trace.K[0][0, 0] - 1.0) < 1e-6


def test_plain_loss_hand_value():
    model, obs = random_model(seed=77, n_x=2, n_z=2, n_t=5)
    trace = run_filter(model, obs)
    expected = sum(np.sum((obs[k] - trace.hx_post[k]) ** 2) for k in range(5))
    assert loss(trace, obs, "plain") == pytest.approx(expected, rel=1e-12)


def test_whitened_loss_scalar_example():
    # single scalar step with mismatch 2 and S = 4: (2 / sqrt(4))^2 = 1
    trace = FilterTrace(
        initial=GaussianState([0.0], [[1.0]]),
        x_pred=np.array([[0.0]]),
        P_pred=np.array([[[3.0]]]),
        K=np.array([[[0.0]]]),
        S=np.array([[[4.0]]]),
        innovation=np.array([[2.0]]),
        x_post=np.array([[0.0]]),
        P_post=np.array([[[1.0]]]),
        hx_post=np.array([[0.0]]),
    )
    assert loss(trace, np.array([[2.0]]), "whitened") == pytest.approx(1.0)


def test_whitened_loss_respects_frozen_weights():
    model, obs = random_model(seed=88, n_x=2, n_z=2, n_t=4)
    trace = run_filter(model, obs)
    own = [sym_inv_sqrt(trace.S[k]) for k in range(4)]
    assert loss(trace, obs, "whitened", whitening=own) == pytest.approx(
        loss(trace, obs, "whitened")
    )
    frozen = [np.eye(2)] * 4
    expected = np.mean([np.sum((obs[k] - trace.hx_post[k]) ** 2) for k in range(4)])
    assert loss(trace, obs, "whitened", whitening=frozen) == pytest.approx(expected)


def test_loss_rejects_unknown_mode():
    model, obs = random_model(seed=3, n_t=2)
    trace = run_filter(model, obs)
    with pytest.raises(ValueError):
        loss(trace, obs, "other")


def test_run_filter_relinearized_matches_fixed_model():
    # a builder that ignores the state reduces to the ordinary linear pass
    model, obs = random_model(seed=99, n_x=2, n_z=1, n_t=5, tied=True)
    trace_fixed = run_filter(model, obs)
    trace_dyn, rebuilt = run_filter_relinearized(
        model.initial, obs, lambda k, x_prev: model.steps[k - 1]
    )
    assert np.allclose(trace_dyn.x_post, trace_fixed.x_post)
    assert rebuilt.n_steps == model.n_steps


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        StepModel(
            F=[[1.0, 0.0]], B=[[0.0]], H=[[1.0]], f=[0.0], u=[0.0], Q=[[1.0]], R=[[1.0]]
        )
    model, obs = random_model(seed=1, n_t=3)
    with pytest.raises(DimensionMismatch):
        run_filter(model, obs[:2])


def test_state_covariance_symmetry_enforced():
    with pytest.raises(Exception):
        GaussianState([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_trace_csv_round_trip(tmp_path):
    model, obs = random_model(seed=21, n_x=2, n_z=1, n_t=4)
    trace = run_filter(model, obs)
    path = tmp_path / "trace.csv"
    trace_to_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# adjkf-csv v1 filter-trace"
    header = lines[1].split(",")
    assert header[0] == "k" and "x_post_0" in header and "innov_0" in header
    assert len(lines) == 2 + 4
    # %.17g round-trips float64 exactly
    first = lines[2].split(",")
    assert float(first[header.index("x_post_1")]) == trace.x_post[0][1]
