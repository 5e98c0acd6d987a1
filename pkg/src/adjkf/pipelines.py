"""End-to-end experiment recipes shared by the CLI and the test fixtures.

Each experiment is a deterministic function of (config, root seed): truth
generation, baseline filtering, operator inversion, and (for the
reaction-diffusion problem) closure training and the re-filtered run with
the learned diffusivity.  The optimizer schedules below are frozen; they
are the product of tuning against the benchmark targets and are not meant
to be clever defaults for new problems.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmarks import (
    ROCKET_F_INIT,
    AllenCahnConfig,
    RocketConfig,
    TruthRun,
    ac_initial_state,
    ac_model_from_lin_states,
    ac_reference_model,
    ac_step_builder,
    ac_truth,
    operator_error_series,
    rocket_model,
    rocket_truth,
    state_metrics,
)
from .closure import (
    Dataset,
    MlpModel,
    TrainConfig,
    closure_step_builder,
    predict_diffusivity,
    train,
)
from .inversion import (
    DiffusivityTable,
    InversionProblem,
    InversionResult,
    LbfgsOptions,
    TiedTransition,
    minimize,
)
from .kalman import FilterTrace, run_filter, run_filter_relinearized
from .linalg import derive_seed, sym_inv_sqrt

__all__ = [
    "ROCKET_SIGMAS",
    "AC_SIGMAS",
    "ROCKET_SCHEDULE",
    "RocketStage",
    "RocketRun",
    "rocket_run",
    "rocket_experiment",
    "allen_cahn_config",
    "AllenCahnRun",
    "allen_cahn_run",
    "allen_cahn_experiment",
    "closure_dataset",
]

ROCKET_SIGMAS = (0.005, 0.025, 0.125)
AC_SIGMAS = (0.0025, 0.005, 0.01)


# ---------------------------------------------------------------------------
# rocket


@dataclass(frozen=True)
class RocketStage:
    """One optimizer round: loss mode, trust radius, iteration budget."""

    mode: str
    radius: float
    max_iter: int


# The posterior-mismatch loss rewards raising the gain (z - H x_post shrinks
# whenever S grows), so a free line search at high noise hops the ridge that
# separates the truth basin from that plateau.  The schedule therefore
# approaches under the one-step prediction loss, which has no such plateau,
# with norm-capped steps of shrinking radius, and only then polishes under
# the posterior loss inside a tight trust region where the plateau is out of
# reach.
ROCKET_SCHEDULE: tuple[RocketStage, ...] = tuple(
    [RocketStage("innovation", r, 80) for r in (0.15, 0.08, 0.04, 0.02, 0.01, 0.005)]
    + [RocketStage("plain", 0.005, 60), RocketStage("plain", 0.002, 60)]
)


@dataclass
class RocketRun:
    """Everything one rocket noise level produces."""

    sigma: float
    cfg: RocketConfig
    truth: TruthRun
    f_init: np.ndarray
    f_opt: np.ndarray
    trace_base: FilterTrace
    trace_opt: FilterTrace
    rmse_base: float
    rmse_opt: float
    stages: list[InversionResult] = field(repr=False)
    wall_time: float = 0.0

    @property
    def ratio(self) -> float:
        return self.rmse_opt / self.rmse_base


def _rmse(trace: FilterTrace, truth: TruthRun) -> float:
    return float(np.sqrt(np.mean((trace.x_post - truth.states[1:]) ** 2)))


def rocket_run(cfg: RocketConfig, sigma: float, seed_root: int = 0,
               f_init: np.ndarray | None = None,
               schedule: tuple[RocketStage, ...] = ROCKET_SCHEDULE) -> RocketRun:
    """Invert the shared transition operator at one noise level."""
    t0 = time.perf_counter()
    f_init = ROCKET_F_INIT if f_init is None else np.asarray(f_init, dtype=float)
    truth = rocket_truth(cfg, sigma, derive_seed(seed_root, "rocket-truth", sigma))
    base = rocket_model(cfg, f_init, sigma)
    design = TiedTransition(f_init)
    theta = design.flatten()
    stages = []
    for stage in schedule:
        problem = InversionProblem(design, base, truth.obs_noisy, mode=stage.mode)
        radius = stage.radius

        def cap(_theta, direction, r=radius):
            return r / max(float(np.linalg.norm(direction)), 1e-300)

        result = minimize(problem, theta, LbfgsOptions(max_iter=stage.max_iter), max_step=cap)
        theta = result.theta
        stages.append(result)
    f_opt = design.with_flat(theta).F
    trace_base = run_filter(base, truth.obs_noisy)
    trace_opt = run_filter(design.with_flat(theta).build(base), truth.obs_noisy)
    return RocketRun(
        sigma=sigma,
        cfg=cfg,
        truth=truth,
        f_init=f_init,
        f_opt=f_opt,
        trace_base=trace_base,
        trace_opt=trace_opt,
        rmse_base=_rmse(trace_base, truth),
        rmse_opt=_rmse(trace_opt, truth),
        stages=stages,
        wall_time=time.perf_counter() - t0,
    )


def rocket_experiment(cfg: RocketConfig | None = None,
                      sigmas=ROCKET_SIGMAS, seed_root: int = 0) -> list[RocketRun]:
    """The full noise sweep with the frozen schedule."""
    cfg = RocketConfig() if cfg is None else cfg
    return [rocket_run(cfg, sigma, seed_root) for sigma in sigmas]


# ---------------------------------------------------------------------------
# reaction-diffusion


def allen_cahn_config() -> AllenCahnConfig:
    """Experiment configuration.

    Two deliberate departures from the library defaults: every cell is
    observed (the synthetic data carries noise at all spatial points, and
    with the sparse mask the low-v stripe branch is unidentifiable), and
    q=1e-6 admits the linearization error of the early outer rounds as
    process noise instead of treating the frozen operators as exact.
    """
    return replace(AllenCahnConfig(), q=1e-6, obs_stride=1)


# Outer-loop shape: stage A holds the linearization at the observations,
# which are the only trustworthy states before any table is known; stage B
# relinearizes at the current filter posterior.  Whitening is refreshed from
# the current table's trace every round but is constant within a round, so
# each inner solve minimizes a fixed deterministic objective.
AC_OUTERS_A = 8
AC_OUTERS_B = 8
AC_ITERS_A = 60
AC_ITERS_B = 30
AC_S_CAP = 10.0
# warm-start clip between rounds: the lower edge keeps the log-barrier
# finite, the upper edge repairs candidates that a relinearization pushed
# past the divergence guard
AC_CLIP = (1e-3, 3.0)
# closure training keeps a table entry only when its accumulated hat-weight
# support along the final linearization states clears this share of the
# total; entries the states merely brush carry optimizer noise instead of
# information (measured: junk entries sit below 0.15% support, informative
# ones above 4%)
AC_MASS_FLOOR_FRAC = 0.01


@dataclass
class AllenCahnRun:
    """Everything one reaction-diffusion noise level produces."""

    sigma: float
    cfg: AllenCahnConfig
    truth: TruthRun
    table: DiffusivityTable
    grad_max: np.ndarray
    support_mass: np.ndarray
    trace_base: FilterTrace
    trace_inv: FilterTrace
    rmse_base: float
    rmse_inv: float
    err_base: np.ndarray
    err_inv: np.ndarray
    metrics_base: dict
    metrics_inv: dict
    outers: list[InversionResult] = field(repr=False)
    wall_time_invert: float = 0.0
    # closure stage (None when training is skipped)
    closure_model: MlpModel | None = None
    closure_history: dict | None = None
    dataset: Dataset | None = None
    trace_closure: FilterTrace | None = None
    rmse_closure: float | None = None
    err_closure: np.ndarray | None = None
    metrics_closure: dict | None = None
    wall_time_closure: float = 0.0

    @property
    def ratio_inv(self) -> float:
        return self.rmse_inv / self.rmse_base

    @property
    def ratio_closure(self) -> float | None:
        if self.rmse_closure is None:
            return None
        return self.rmse_closure / self.rmse_base


def closure_dataset(table: DiffusivityTable, grad_max: np.ndarray,
                    support_mass: np.ndarray, provenance: str = "") -> Dataset:
    """Supervised pairs (node, value) for the identified table entries.

    An entry is kept when its data-misfit gradient ever exceeded 1e-10 and
    its hat-weight support mass clears AC_MASS_FLOOR_FRAC of the total.
    """
    keep = (grad_max > 1e-10) & (support_mass >= AC_MASS_FLOOR_FRAC * support_mass.sum())
    return Dataset(table.nodes[keep][:, None], table.values[keep][:, None], provenance=provenance)


def allen_cahn_run(cfg: AllenCahnConfig, sigma: float, seed_root: int = 0,
                   train_closure: bool = True) -> AllenCahnRun:
    """Invert the diffusivity table at one noise level, then train the closure."""
    t0 = time.perf_counter()
    truth = ac_truth(cfg, sigma=sigma, seed=derive_seed(seed_root, "ac-truth", sigma))
    obs, v0 = truth.obs_noisy, truth.states[0]

    def d_base(v):
        return np.full_like(np.asarray(v, dtype=float), 1.0)

    trace_base, _ = run_filter_relinearized(
        ac_initial_state(cfg, v0), obs, ac_step_builder(cfg, d_base, sigma))
    whitening = [sym_inv_sqrt(trace_base.S[k]) for k in range(cfg.n_steps)]

    lin = np.vstack([v0[None, :], obs[:-1]])
    values = np.full(cfg.table_size, 1.0)
    outers: list[InversionResult] = []
    problem = None
    trace_inv = trace_base
    for outer in range(AC_OUTERS_A + AC_OUTERS_B):
        stage_b = outer >= AC_OUTERS_A
        values = np.clip(values, *AC_CLIP)
        base = ac_model_from_lin_states(cfg, d_base, lin, sigma)
        design = DiffusivityTable(values, cfg, lin)
        problem = InversionProblem(design, base, obs, mode="whitened",
                                   whitening=whitening, s_cap=AC_S_CAP)
        result = minimize(problem, values,
                          LbfgsOptions(max_iter=AC_ITERS_B if stage_b else AC_ITERS_A))
        values = result.theta
        outers.append(result)
        table = design.with_flat(values)
        trace_inv, _ = run_filter_relinearized(
            ac_initial_state(cfg, v0), obs, ac_step_builder(cfg, table, sigma))
        whitening = [sym_inv_sqrt(trace_inv.S[k]) for k in range(cfg.n_steps)]
        if stage_b:
            lin = np.vstack([v0[None, :], trace_inv.x_post[:-1]])

    table = DiffusivityTable(values, cfg, lin)
    support_mass = table._hat_weights(
        np.clip(table.lin_states.ravel(), 0.0, 1.0)).sum(axis=0)
    P_ref = run_filter(ac_reference_model(cfg, truth), obs).P_post
    run = AllenCahnRun(
        sigma=sigma,
        cfg=cfg,
        truth=truth,
        table=table,
        grad_max=problem.data_grad_max,
        support_mass=support_mass,
        trace_base=trace_base,
        trace_inv=trace_inv,
        rmse_base=_rmse(trace_base, truth),
        rmse_inv=_rmse(trace_inv, truth),
        err_base=operator_error_series(cfg, truth, d_base),
        err_inv=operator_error_series(cfg, truth, table),
        metrics_base=state_metrics(trace_base, truth, P_ref),
        metrics_inv=state_metrics(trace_inv, truth, P_ref),
        outers=outers,
        wall_time_invert=time.perf_counter() - t0,
    )
    if not train_closure:
        return run

    t1 = time.perf_counter()
    run.dataset = closure_dataset(table, run.grad_max, support_mass,
                                  provenance=f"table-inversion sigma={sigma}")
    train_cfg = TrainConfig(seed=derive_seed(seed_root, "closure", sigma) % 2**31)
    run.closure_model, run.closure_history = train(run.dataset, train_cfg)

    def d_mlp(v):
        return predict_diffusivity(run.closure_model, v)

    run.trace_closure, _ = run_filter_relinearized(
        ac_initial_state(cfg, v0), obs, closure_step_builder(run.closure_model, cfg, sigma))
    run.rmse_closure = _rmse(run.trace_closure, truth)
    run.err_closure = operator_error_series(cfg, truth, d_mlp)
    run.metrics_closure = state_metrics(run.trace_closure, truth, P_ref)
    run.wall_time_closure = time.perf_counter() - t1
    return run


def allen_cahn_experiment(cfg: AllenCahnConfig | None = None, sigmas=AC_SIGMAS,
                          seed_root: int = 0, train_closure: bool = True) -> list[AllenCahnRun]:
    """The full noise sweep with the frozen schedule."""
    cfg = allen_cahn_config() if cfg is None else cfg
    return [allen_cahn_run(cfg, sigma, seed_root, train_closure) for sigma in sigmas]
