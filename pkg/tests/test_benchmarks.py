"""Tests for the truth simulators, operator builders, and metrics."""

import dataclasses
import warnings

import numpy as np
import pytest

from adjkf.benchmarks import (
    ROCKET_F_INIT,
    AllenCahnConfig,
    RocketConfig,
    ac_initial,
    ac_operator,
    ac_step_operator,
    ac_step_truth,
    ac_truth,
    ac_truth_operators,
    diffusivity_true,
    operator_error_series,
    periodic_laplacian,
    rel_frob_error,
    rocket_model,
    rocket_truth,
    state_metrics,
    truth_to_csv,
)
from adjkf.kalman import run_filter
from adjkf.linalg import derive_seed


# ---------------------------------------------------------------------------
# rocket truth


def test_rocket_free_drift():
    cfg = dataclasses.replace(RocketConfig(), thrust_accel=0.0, gravity=0.0, x0=(0.0, 1.0))
    truth = rocket_truth(cfg, sigma=0.0, seed=1)
    for k in range(cfg.n_steps + 1):
        assert np.allclose(truth.states[k], [k * cfg.dt, 1.0])


def test_rocket_constant_deceleration_after_burn():
    cfg = dataclasses.replace(RocketConfig(), thrust_accel=0.0)
    truth = rocket_truth(cfg, sigma=0.0, seed=1)
    dv = np.diff(truth.states[:, 1])
    assert np.allclose(dv, -cfg.gravity * cfg.dt)


def test_rocket_thrust_switch():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.0, seed=1)
    dv = np.diff(truth.states[:, 1])
    n_burn = int(cfg.burn_frac * cfg.n_steps)
    assert np.allclose(dv[:n_burn], (cfg.thrust_accel - cfg.gravity) * cfg.dt)
    assert np.allclose(dv[n_burn:], -cfg.gravity * cfg.dt)


def test_rocket_truth_replays_its_own_recursion():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.0, seed=3)
    F = cfg.F_true
    B = np.array([[0.0], [cfg.dt * cfg.thrust_accel]])
    f = np.array([0.0, -cfg.gravity * cfg.dt])
    for k in range(1, cfg.n_steps + 1):
        u = np.array([1.0 if cfg.thrust_on(k) else 0.0])
        expected = F @ truth.states[k - 1] + B @ u + f
        assert np.max(np.abs(truth.states[k] - expected)) < 1e-14


def test_rocket_observation_is_altitude_plus_noise():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.125, seed=7)
    assert truth.obs_clean.shape == (cfg.n_steps, 1)
    assert np.allclose(truth.obs_clean[:, 0], truth.states[1:, 0])
    assert not np.allclose(truth.obs_noisy, truth.obs_clean)


@pytest.mark.parametrize("sigma", [0.005, 0.025, 0.125])
def test_rocket_truth_bit_identical_regeneration(sigma):
    cfg = RocketConfig()
    seed = derive_seed(0, "rocket-truth", sigma)
    a = rocket_truth(cfg, sigma, seed)
    b = rocket_truth(cfg, sigma, seed)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.obs_noisy.tobytes() == b.obs_noisy.tobytes()


def test_rocket_model_matches_truth_dynamics():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.0, seed=1)
    model = rocket_model(cfg, cfg.F_true, sigma=0.5)
    for k in range(1, cfg.n_steps + 1):
        step = model.steps[k - 1]
        expected = step.F @ truth.states[k - 1] + step.B @ step.u + step.f
        assert np.allclose(expected, truth.states[k])


def test_rocket_f_init_is_frozen():
    with pytest.raises(ValueError):
        ROCKET_F_INIT[0, 0] = 2.0


# ---------------------------------------------------------------------------
# reaction-diffusion pieces


def test_ac_initial_pure_stripes_without_bump():
    cfg = dataclasses.replace(AllenCahnConfig(), amp=0.0)
    v0 = ac_initial(cfg, phase=1.234)
    assert set(np.unique(v0)) <= {0.0, 1.0}
    # 8 stripes on 16 cells alternate cell by cell
    assert np.allclose(v0, np.tile([1.0, 0.0], cfg.n // 2))


@pytest.mark.parametrize("phase", np.linspace(0.0, 2.0 * np.pi, 7))
def test_ac_initial_stays_in_unit_interval(phase):
    v0 = ac_initial(AllenCahnConfig(), phase)
    assert v0.min() >= 0.0 and v0.max() <= 1.0


def test_ac_step_fixed_points():
    cfg = AllenCahnConfig()
    for stepper in (ac_step_truth, ac_step_operator):
        assert np.allclose(stepper(np.zeros(cfg.n), cfg), 0.0)
        assert np.allclose(stepper(np.ones(cfg.n), cfg), 1.0)


def test_ac_step_convergence_order():
    cfg = AllenCahnConfig()
    v0 = ac_initial(cfg, phase=0.3)
    horizon = 4 * cfg.dt

    def march(dt):
        c = dataclasses.replace(cfg, dt=dt)
        v = v0
        for _ in range(int(round(horizon / dt))):
            v = ac_step_truth(v, c)
        return v

    reference = march(cfg.dt / 64)
    err_full = np.linalg.norm(march(cfg.dt) - reference)
    err_half = np.linalg.norm(march(cfg.dt / 2) - reference)
    # explicit Euler: halving dt halves the global error at fixed horizon
    assert 1.7 < err_full / err_half < 2.3


def test_periodic_laplacian_row_sums_and_stencil():
    d2 = periodic_laplacian(16)
    assert np.allclose(d2.sum(axis=1), 0.0)
    assert np.allclose(np.diag(d2), -2.0)
    assert d2[0, 15] == 1.0 and d2[15, 0] == 1.0


def test_ac_operator_at_zero_state():
    cfg = AllenCahnConfig()
    v = np.zeros(cfg.n)
    F, bias = ac_operator(diffusivity_true(v), v, cfg)
    assert np.allclose(F, (1.0 + cfg.dt) * np.eye(cfg.n))
    assert np.allclose(bias, 0.0)


def test_ac_operator_reproduces_operator_step():
    cfg = AllenCahnConfig()
    rng = np.random.default_rng(5)
    v = rng.uniform(0.0, 1.0, cfg.n)
    F, bias = ac_operator(diffusivity_true(v), v, cfg)
    assert np.max(np.abs(F @ v + bias - ac_step_operator(v, cfg))) < 1e-12


def test_ac_operator_matches_conservative_step_at_constant_state():
    cfg = AllenCahnConfig()
    for c in (0.2, 0.5, 0.9):
        v = np.full(cfg.n, c)
        F, bias = ac_operator(diffusivity_true(v), v, cfg)
        frozen = ac_step_truth(v, cfg, d_fn=lambda _, c=c: np.full(cfg.n, diffusivity_true(c)))
        assert np.max(np.abs(F @ v + bias - frozen)) < 1e-12


def test_ac_truth_operators_are_built_at_previous_state():
    cfg = AllenCahnConfig()
    truth = ac_truth(cfg, sigma=0.0, seed=2)
    ops = ac_truth_operators(truth, cfg)
    assert len(ops) == cfg.n_steps
    for k, (F, bias) in enumerate(ops, start=1):
        assert np.max(np.abs(F @ truth.states[k - 1] + bias - truth.states[k])) < 1e-12


@pytest.mark.parametrize("scheme", ["operator", "conservative"])
def test_ac_truth_states_bounded_and_finite(scheme):
    cfg = AllenCahnConfig()
    for sigma in (0.0025, 0.005, 0.01):
        truth = ac_truth(cfg, sigma, derive_seed(0, "ac-truth", sigma), scheme=scheme)
        assert np.all(np.isfinite(truth.states))
        assert np.abs(truth.states).max() <= 10.0


def test_ac_truth_bit_identical_regeneration():
    cfg = AllenCahnConfig()
    seed = derive_seed(0, "ac-truth", 0.005)
    a = ac_truth(cfg, 0.005, seed)
    b = ac_truth(cfg, 0.005, seed)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.obs_noisy.tobytes() == b.obs_noisy.tobytes()


def test_ac_truth_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        ac_truth(AllenCahnConfig(), 0.005, 1, scheme="implicit")


def test_ac_observation_mask():
    cfg = AllenCahnConfig()
    truth = ac_truth(cfg, sigma=0.0, seed=4)
    assert truth.obs_clean.shape == (cfg.n_steps, cfg.n // cfg.obs_stride)
    assert np.allclose(truth.obs_clean, truth.states[1:, cfg.observed_indices])
    full = dataclasses.replace(cfg, obs_stride=1)
    assert full.H.shape == (cfg.n, cfg.n)
    assert np.allclose(full.H, np.eye(cfg.n))


def test_stability_warning_fires_for_stiff_config():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dataclasses.replace(AllenCahnConfig(), dt=0.5)
    assert any("stiffness" in str(w.message) for w in caught)


def test_default_config_does_not_warn():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        AllenCahnConfig()
    assert not caught


# ---------------------------------------------------------------------------
# metrics


def test_rel_frob_error_examples():
    F = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rel_frob_error(F, F) == 0.0
    assert np.isclose(rel_frob_error(2.0 * F, F), 1.0)
    with pytest.raises(ValueError):
        rel_frob_error(F, np.zeros((2, 2)))


def test_initial_guess_operator_error_band():
    cfg = dataclasses.replace(AllenCahnConfig(), obs_stride=1)
    for sigma in (0.0025, 0.005, 0.01):
        truth = ac_truth(cfg, sigma, derive_seed(0, "ac-truth", sigma))
        errs = operator_error_series(cfg, truth, lambda v: np.ones_like(v))
        assert errs.shape == (cfg.n_steps,)
        assert 0.15 < errs.min() and errs.max() < 0.35


def test_operator_error_series_zero_at_truth():
    cfg = AllenCahnConfig()
    truth = ac_truth(cfg, 0.005, seed=9)
    errs = operator_error_series(cfg, truth, diffusivity_true)
    assert np.allclose(errs, 0.0)


def test_state_metrics_zero_when_exact():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.005, seed=11)
    model = rocket_model(cfg, cfg.F_true, 0.005)
    trace = run_filter(model, truth.obs_noisy)
    injected = dataclasses.replace(trace, x_post=truth.states[1:].copy())
    metrics = state_metrics(injected, truth, P_ref=trace.P_post)
    assert metrics["rmse"] == 0.0
    assert np.allclose(metrics["rmse_steps"], 0.0)
    assert metrics["cov_diag_dev"] == 0.0


def test_state_metrics_shapes():
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.025, seed=13)
    trace = run_filter(rocket_model(cfg, ROCKET_F_INIT, 0.025), truth.obs_noisy)
    metrics = state_metrics(trace, truth)
    assert metrics["rmse_steps"].shape == (cfg.n_steps,)
    assert metrics["rmse"] > 0.0
    assert "cov_diag_dev" not in metrics


def test_truth_to_csv_bundle(tmp_path):
    cfg = RocketConfig()
    truth = rocket_truth(cfg, sigma=0.025, seed=13)
    paths = truth_to_csv(truth, cfg, tmp_path / "bundle")
    names = {p.name for p in paths}
    assert {"states.csv", "obs_clean.csv", "obs_noisy.csv", "config.csv"} <= names
    states = np.loadtxt(tmp_path / "bundle" / "states.csv", delimiter=",", skiprows=2)
    assert np.allclose(states[:, 1:], truth.states)
    with open(tmp_path / "bundle" / "states.csv") as fh:
        assert fh.readline().startswith("# adjkf-csv v1")
