"""Benchmark problems: a 1-d rocket and a reaction-diffusion bar.

Both generate synthetic truth plus noisy observations from a seed, and both
expose the pieces the inversion needs: step-model builders, reference
operator sequences and error metrics.

Rocket: double-integrator altitude/velocity dynamics with constant thrust
acceleration during an initial burn window and gravity throughout.  Only
altitude is observed.

Reaction-diffusion bar: v_t = (d(v) v_x)_x - v^3 + v on a periodic domain,
d(v) = 0.1 tanh(v), marched with a conservative explicit Euler stepper on
cell centers.  The filter sees a linearized transition operator

    F = I + dt (diag(d(v)) D2 / dx^2 + diag(1 - 3 v^2)),  bias = 2 dt v^3

built at a linearization state v; with the true d and v on the truth
trajectory this is the operator sequence the synthetic data identifies.
"""

from __future__ import annotations

import csv
import pathlib
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .kalman import GaussianState, ModelSequence, StepModel, FilterTrace
from .linalg import make_rng

__all__ = [
    "RocketConfig",
    "AllenCahnConfig",
    "TruthRun",
    "ROCKET_F_INIT",
    "rocket_truth",
    "rocket_model",
    "diffusivity_true",
    "periodic_laplacian",
    "ac_initial",
    "ac_step_truth",
    "ac_step_operator",
    "ac_truth",
    "ac_operator",
    "ac_truth_operators",
    "ac_step_model",
    "ac_step_builder",
    "ac_model_from_lin_states",
    "ac_reference_model",
    "ac_initial_state",
    "rel_frob_error",
    "operator_error_series",
    "state_metrics",
    "truth_to_csv",
]

# Shipped initial operator guess for the rocket inversion experiments.
ROCKET_F_INIT = np.array([[0.957691, 0.088596], [-0.072960, 0.967528]])
ROCKET_F_INIT.setflags(write=False)


@dataclass(frozen=True)
class RocketConfig:
    """Rocket experiment parameters (all config-overridable)."""

    dt: float = 0.1
    n_steps: int = 100
    thrust_accel: float = 30.0     # thrust force over mass
    gravity: float = 9.81
    burn_frac: float = 0.4         # fraction of the horizon under thrust
    x0: tuple = (0.0, 0.0)
    p0: float = 0.01               # initial covariance = p0 * I
    # process noise covariance = q * I.  Kept well above zero on purpose:
    # with H = [1, 0] and the thrust/gravity inputs confined to the velocity
    # component, the shear x -> [[1, 0], [t, 1]] x changes F without changing
    # any prediction of a noise-free filter, so only the covariance flow
    # distinguishes the true operator from its shear orbit.  A visible q
    # keeps that flow informative over the whole horizon
    q: float = 1e-5

    @property
    def F_true(self) -> np.ndarray:
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    def thrust_on(self, k: int) -> bool:
        """Thrust active for step k (1-based): burn covers the first burn_frac of steps."""
        return (k - 1) * self.dt < self.burn_frac * self.n_steps * self.dt


@dataclass(frozen=True)
class AllenCahnConfig:
    """Reaction-diffusion experiment parameters.

    Cell-centered grid x_i = (i + 1/2) dx on a periodic domain of the given
    length.  The default 8-stripe initial template puts one cell per stripe
    at n=16, which is deliberately under-resolved but matches the intended
    alternating pattern (node-centered sampling would degenerate to 1/2
    everywhere).
    """

    n: int = 16
    n_steps: int = 30
    dt: float = 0.01
    # the domain length sets the diffusion number dt*d/dx^2; 5.0 puts the
    # d-is-wrong-everywhere starting operator at a relative error near 0.25,
    # with the explicit stepper comfortably stable (see __post_init__)
    length: float = 5.0
    amp: float = 0.18              # amplitude of the sinusoidal IC perturbation
    k_wave: int = 3                # wavenumber of the IC perturbation
    stripes: int = 8
    obs_stride: int = 2            # observe every obs_stride-th cell
    p0: float = 1e-4
    q: float = 1e-8
    table_size: int = 17           # diffusivity table nodes on [0, 1]

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def cells(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.dx

    @property
    def observed_indices(self) -> np.ndarray:
        return np.arange(0, self.n, self.obs_stride)

    @property
    def H(self) -> np.ndarray:
        h = np.zeros((self.observed_indices.size, self.n))
        h[np.arange(self.observed_indices.size), self.observed_indices] = 1.0
        return h

    def __post_init__(self):
        # explicit stepper stability estimate: diffusion + reaction stiffness
        d_max = float(diffusivity_true(np.array([1.0]))[0])
        stiffness = 4.0 * d_max / self.dx**2 + 3.0
        if self.dt * stiffness >= 1.0:
            warnings.warn(
                f"dt * stiffness estimate = {self.dt * stiffness:.2f} >= 1; "
                "explicit truth stepper may be unstable",
                stacklevel=2,
            )


@dataclass(frozen=True)
class TruthRun:
    """Synthetic truth: states, clean and noisy observations, provenance."""

    states: np.ndarray        # (n_steps + 1, n_x), row 0 is the initial state
    obs_clean: np.ndarray     # (n_steps, n_z)
    obs_noisy: np.ndarray     # (n_steps, n_z)
    sigma: float
    seed: int


def rocket_truth(cfg: RocketConfig, sigma: float, seed: int) -> TruthRun:
    """Simulate the rocket and observe altitude with N(0, sigma^2) noise.

    Dynamics are deterministic; observation noise is the only randomness,
    so runs regenerate bit-identically from (cfg, sigma, seed).
    """
    F = cfg.F_true
    B = np.array([[0.0], [cfg.dt * cfg.thrust_accel]])
    f = np.array([0.0, -cfg.gravity * cfg.dt])
    H = np.array([[1.0, 0.0]])
    states = np.empty((cfg.n_steps + 1, 2))
    states[0] = cfg.x0
    for k in range(1, cfg.n_steps + 1):
        u = np.array([1.0 if cfg.thrust_on(k) else 0.0])
        states[k] = F @ states[k - 1] + B @ u + f
    obs_clean = states[1:] @ H.T
    rng = make_rng(seed)
    obs_noisy = obs_clean + sigma * rng.standard_normal(obs_clean.shape)
    return TruthRun(states=states, obs_clean=obs_clean, obs_noisy=obs_noisy, sigma=sigma, seed=seed)


def rocket_model(cfg: RocketConfig, F: np.ndarray, sigma: float) -> ModelSequence:
    """Model sequence for the rocket with a tied transition operator F.

    Thrust input, gravity forcing, observation operator, Q and R follow the
    config; only F is the caller's to vary.
    """
    B = np.array([[0.0], [cfg.dt * cfg.thrust_accel]])
    f = np.array([0.0, -cfg.gravity * cfg.dt])
    H = np.array([[1.0, 0.0]])
    Q = cfg.q * np.eye(2)
    R = np.array([[sigma**2]])
    steps = [
        StepModel(F, B, H, f, np.array([1.0 if cfg.thrust_on(k) else 0.0]), Q, R)
        for k in range(1, cfg.n_steps + 1)
    ]
    initial = GaussianState(np.array(cfg.x0), cfg.p0 * np.eye(2))
    return ModelSequence(initial, steps)


def diffusivity_true(v: np.ndarray) -> np.ndarray:
    """Ground-truth state-dependent diffusivity d(v) = 0.1 tanh(v)."""
    return 0.1 * np.tanh(np.asarray(v, dtype=float))


def periodic_laplacian(n: int) -> np.ndarray:
    """Second-difference matrix with periodic wrap, stencil (1, -2, 1)."""
    d2 = -2.0 * np.eye(n)
    idx = np.arange(n)
    d2[idx, (idx + 1) % n] = 1.0
    d2[idx, (idx - 1) % n] = 1.0
    return d2


def ac_initial(cfg: AllenCahnConfig, phase: float) -> np.ndarray:
    """Striped initial condition with a sinusoidal perturbation, clipped to [0, 1].

    Template: (1 + sign(sin(2 pi stripes x / length))) / 2 on cell centers,
    plus amp * sin(2 pi k_wave x / length + phase).
    """
    x = cfg.cells
    stripe = 0.5 * (1.0 + np.sign(np.sin(2.0 * np.pi * cfg.stripes * x / cfg.length)))
    bump = cfg.amp * np.sin(2.0 * np.pi * cfg.k_wave * x / cfg.length + phase)
    return np.clip(stripe + bump, 0.0, 1.0)


def ac_step_truth(v: np.ndarray, cfg: AllenCahnConfig, d_fn=diffusivity_true) -> np.ndarray:
    """One conservative explicit Euler step of v_t = (d(v) v_x)_x - v^3 + v.

    Fluxes live on faces with arithmetically averaged diffusivity,
    d_{i+1/2} = (d_i + d_{i+1}) / 2, so the scheme conserves the diffusive
    part exactly and reduces to the standard three-point formula when d is
    constant.
    """
    v = np.asarray(v, dtype=float)
    d = d_fn(v)
    d_face = 0.5 * (d + np.roll(d, -1))          # face i+1/2 between cells i, i+1
    flux = d_face * (np.roll(v, -1) - v) / cfg.dx
    div = (flux - np.roll(flux, 1)) / cfg.dx
    return v + cfg.dt * (div + v - v**3)


def ac_step_operator(v: np.ndarray, cfg: AllenCahnConfig, d_fn=diffusivity_true) -> np.ndarray:
    """One explicit Euler step of the non-conservative form d(v) v_xx - v^3 + v.

    This is the discretization the linearized transition operators represent:
    the step equals F(v) v + bias(v) with F, bias from ``ac_operator``, so a
    trajectory marched this way is exactly representable by the operator
    family the inversion searches.  It differs from the conservative stepper
    at O(dx) wherever d varies between neighbouring cells.
    """
    v = np.asarray(v, dtype=float)
    lap = np.roll(v, -1) - 2.0 * v + np.roll(v, 1)
    return v + cfg.dt * (d_fn(v) * lap / cfg.dx**2 + v - v**3)


def ac_truth(cfg: AllenCahnConfig, sigma: float, seed: int, scheme: str = "operator") -> TruthRun:
    """March the truth and observe the masked cells with N(0, sigma^2) noise.

    The IC phase and the observation noise both derive from ``seed``.
    ``scheme`` picks the stepper: "operator" marches the non-conservative
    central discretization (data representable by the learned operator
    class, the setting the inversion experiments use), "conservative" the
    face-averaged flux form.
    """
    steppers = {"operator": ac_step_operator, "conservative": ac_step_truth}
    if scheme not in steppers:
        raise ValueError(f"unknown truth scheme {scheme!r}")
    step = steppers[scheme]
    rng = make_rng(seed)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    states = np.empty((cfg.n_steps + 1, cfg.n))
    states[0] = ac_initial(cfg, phase)
    for k in range(1, cfg.n_steps + 1):
        states[k] = step(states[k - 1], cfg)
    if not np.all(np.isfinite(states)):
        raise FloatingPointError("truth trajectory produced non-finite states")
    if np.abs(states).max() > 10.0:
        warnings.warn(f"truth states reached |v| = {np.abs(states).max():.2f} > 10", stacklevel=2)
    H = cfg.H
    obs_clean = states[1:] @ H.T
    obs_noisy = obs_clean + sigma * rng.standard_normal(obs_clean.shape)
    return TruthRun(states=states, obs_clean=obs_clean, obs_noisy=obs_noisy, sigma=sigma, seed=seed)


def ac_operator(d_vals: np.ndarray, v_lin: np.ndarray, cfg: AllenCahnConfig) -> tuple[np.ndarray, np.ndarray]:
    """Linearized transition operator and bias at state v_lin.

    F = I + dt (diag(d_vals) D2 / dx^2 + diag(1 - 3 v^2)), bias = 2 dt v^3.
    F v + bias reproduces one explicit Euler step of the non-conservative
    form diag(d(v)) v_xx - v^3 + v exactly.
    """
    v_lin = np.asarray(v_lin, dtype=float)
    d_vals = np.asarray(d_vals, dtype=float)
    if d_vals.shape != v_lin.shape:
        raise DimensionMismatch(f"d values {d_vals.shape} vs state {v_lin.shape}")
    d2 = periodic_laplacian(cfg.n)
    F = np.eye(cfg.n) + cfg.dt * (d_vals[:, None] * d2 / cfg.dx**2 + np.diag(1.0 - 3.0 * v_lin**2))
    bias = 2.0 * cfg.dt * v_lin**3
    return F, bias


def ac_truth_operators(truth: TruthRun, cfg: AllenCahnConfig) -> list:
    """True (F_k, bias_k) along the truth trajectory, step k built at state k-1."""
    return [
        ac_operator(diffusivity_true(truth.states[k - 1]), truth.states[k - 1], cfg)
        for k in range(1, cfg.n_steps + 1)
    ]


def ac_step_model(cfg: AllenCahnConfig, d_vals: np.ndarray, v_lin: np.ndarray, sigma: float) -> StepModel:
    """StepModel with the linearized operator at v_lin and given cell diffusivities."""
    F, bias = ac_operator(d_vals, v_lin, cfg)
    n = cfg.n
    return StepModel(
        F=F,
        B=np.zeros((n, 1)),
        H=cfg.H,
        f=bias,
        u=np.zeros(1),
        Q=cfg.q * np.eye(n),
        R=sigma**2 * np.eye(cfg.observed_indices.size),
    )


def ac_step_builder(cfg: AllenCahnConfig, d_fn, sigma: float):
    """Step builder for relinearized runs: operator rebuilt at each posterior."""

    def build(k: int, x_prev: np.ndarray) -> StepModel:
        return ac_step_model(cfg, d_fn(x_prev), x_prev, sigma)

    return build


def ac_model_from_lin_states(cfg: AllenCahnConfig, d_fn, lin_states: np.ndarray, sigma: float) -> ModelSequence:
    """Fixed model sequence with operators built at frozen linearization states.

    ``lin_states`` has one row per step k = 1..n_steps, the state the step-k
    operator is built at (typically the previous posterior of a reference
    run).
    """
    lin_states = np.asarray(lin_states, dtype=float)
    if lin_states.shape != (cfg.n_steps, cfg.n):
        raise DimensionMismatch(f"lin_states {lin_states.shape}, expected {(cfg.n_steps, cfg.n)}")
    steps = [ac_step_model(cfg, d_fn(lin_states[k]), lin_states[k], sigma) for k in range(cfg.n_steps)]
    return ModelSequence(ac_initial_state(cfg, lin_states[0]), steps)


def ac_initial_state(cfg: AllenCahnConfig, v0: np.ndarray) -> GaussianState:
    """Filter prior: the shared initial condition with covariance p0 * I."""
    return GaussianState(np.asarray(v0, dtype=float), cfg.p0 * np.eye(cfg.n))


def ac_reference_model(cfg: AllenCahnConfig, truth: TruthRun) -> ModelSequence:
    """Model sequence with the true operators along the truth trajectory."""
    steps = [
        ac_step_model(cfg, diffusivity_true(truth.states[k]), truth.states[k], truth.sigma)
        for k in range(cfg.n_steps)
    ]
    return ModelSequence(ac_initial_state(cfg, truth.states[0]), steps)


def rel_frob_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Relative Frobenius distance ||candidate - reference||_F / ||reference||_F."""
    ref = np.linalg.norm(reference)
    if ref == 0.0:
        raise ValueError("reference operator has zero norm")
    return float(np.linalg.norm(candidate - reference) / ref)


def operator_error_series(cfg: AllenCahnConfig, truth: TruthRun, d_fn) -> np.ndarray:
    """Per-step relative Frobenius error of the candidate diffusivity's operator.

    Both the candidate and the true operator are evaluated at the truth
    states, so the series isolates the diffusivity error from state
    estimation error.
    """
    errors = np.empty(cfg.n_steps)
    for k in range(1, cfg.n_steps + 1):
        v = truth.states[k - 1]
        F_hat, _ = ac_operator(d_fn(v), v, cfg)
        F_true, _ = ac_operator(diffusivity_true(v), v, cfg)
        errors[k - 1] = rel_frob_error(F_hat, F_true)
    return errors


def state_metrics(trace: FilterTrace, truth: TruthRun, P_ref: np.ndarray | None = None) -> dict:
    """Error metrics of a filter run against the truth.

    Returns per-step state RMSE, the aggregate RMSE, and (when ``P_ref``,
    an (n_t, n_x, n_x) reference covariance stack, is given) the mean
    absolute deviation of the posterior covariance diagonal from it.
    """
    diff = trace.x_post - truth.states[1:]
    rmse_steps = np.sqrt(np.mean(diff**2, axis=1))
    out = {
        "rmse_steps": rmse_steps,
        "rmse": float(np.sqrt(np.mean(diff**2))),
    }
    if P_ref is not None:
        dev = np.abs(
            np.array([np.diag(p) for p in trace.P_post]) - np.array([np.diag(p) for p in P_ref])
        )
        out["cov_diag_dev_steps"] = np.mean(dev, axis=1)
        out["cov_diag_dev"] = float(np.mean(dev))
    return out


def truth_to_csv(truth: TruthRun, cfg, out_dir) -> list:
    """Write a truth bundle: states.csv, obs_clean.csv, obs_noisy.csv, config.csv.

    Returns the list of paths written.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def write(name, header, rows, schema):
        path = out_dir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# adjkf-csv v1 {schema}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        paths.append(path)

    n_x = truth.states.shape[1]
    write(
        "states.csv",
        ["k"] + [f"x_{i}" for i in range(n_x)],
        [[k] + [f"{v:.17g}" for v in truth.states[k]] for k in range(truth.states.shape[0])],
        "truth-states",
    )
    n_z = truth.obs_clean.shape[1]
    for name, data, schema in (
        ("obs_clean.csv", truth.obs_clean, "obs-clean"),
        ("obs_noisy.csv", truth.obs_noisy, "obs-noisy"),
    ):
        write(
            name,
            ["k"] + [f"z_{i}" for i in range(n_z)],
            [[k + 1] + [f"{v:.17g}" for v in data[k]] for k in range(data.shape[0])],
            schema,
        )
    write(
        "config.csv",
        ["key", "value"],
        sorted([k, repr(v)] for k, v in vars(cfg).items())
        + [["sigma", repr(truth.sigma)], ["seed", repr(truth.seed)]],
        "config-echo",
    )
    return paths
