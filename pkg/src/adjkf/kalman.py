"""Linear Kalman filter in residual form.

The filter is written so that one pass produces everything the adjoint
needs afterwards: per-step gains, innovation covariances and the full
predicted/posterior trace.  The update is algebraically identical to the
fixed point of the stacked residual

    r_x[k] = x[k] - (I - K[k] H[k]) (F[k] x[k-1] + B[k] u[k] + f[k]) - K[k] z[k]
    R_P[k] = P[k] - (I - K[k] H[k]) (F[k] P[k-1] F[k]^T + Q[k])

which is what :mod:`adjkf.adjoint` differentiates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NotPsd
from .linalg import as_matrix, as_vector, solve, sym_inv_sqrt, vec

__all__ = [
    "GaussianState",
    "StepModel",
    "ModelSequence",
    "FilterTrace",
    "predict",
    "gain",
    "update",
    "run_filter",
    "run_filter_relinearized",
    "residual_step",
    "residual",
    "loss",
    "trace_to_csv",
]


@dataclass(frozen=True)
class GaussianState:
    """State estimate: mean ``x`` and covariance ``P``."""

    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", as_vector(self.x, "x"))
        object.__setattr__(self, "P", as_matrix(self.P, "P"))
        n = self.x.size
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P shape {self.P.shape} vs state dim {n}")
        if not np.allclose(self.P, self.P.T, atol=1e-12 * max(1.0, np.abs(self.P).max())):
            raise NotPsd("P must be symmetric")

    @property
    def dim(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class StepModel:
    """One step of a (possibly time-varying) linear state-space model.

    x[k] = F x[k-1] + B u + f + w,  w ~ N(0, Q)
    z[k] = H x[k]             + e,  e ~ N(0, R)

    ``f`` carries any constant forcing (gravity, linearization bias).
    """

    F: np.ndarray
    B: np.ndarray
    H: np.ndarray
    f: np.ndarray
    u: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F", as_matrix(self.F, "F"))
        object.__setattr__(self, "B", as_matrix(self.B, "B"))
        object.__setattr__(self, "H", as_matrix(self.H, "H"))
        object.__setattr__(self, "f", as_vector(self.f, "f"))
        object.__setattr__(self, "u", as_vector(self.u, "u"))
        object.__setattr__(self, "Q", as_matrix(self.Q, "Q"))
        object.__setattr__(self, "R", as_matrix(self.R, "R"))
        n, m = self.F.shape
        if n != m:
            raise DimensionMismatch(f"F must be square, got {self.F.shape}")
        if self.B.shape[0] != n or self.B.shape[1] != self.u.size:
            raise DimensionMismatch(f"B {self.B.shape} vs state {n}, input {self.u.size}")
        if self.f.size != n:
            raise DimensionMismatch(f"f length {self.f.size} vs state dim {n}")
        if self.H.shape[1] != n:
            raise DimensionMismatch(f"H {self.H.shape} vs state dim {n}")
        if self.Q.shape != (n, n):
            raise DimensionMismatch(f"Q {self.Q.shape} vs state dim {n}")
        nz = self.H.shape[0]
        if self.R.shape != (nz, nz):
            raise DimensionMismatch(f"R {self.R.shape} vs obs dim {nz}")

    @property
    def n_x(self) -> int:
        return self.F.shape[0]

    @property
    def n_z(self) -> int:
        return self.H.shape[0]

    def replace_F(self, F) -> "StepModel":
        return StepModel(F, self.B, self.H, self.f, self.u, self.Q, self.R)

    def drift(self, x_prev: np.ndarray) -> np.ndarray:
        """Deterministic propagation F x + B u + f."""
        return self.F @ x_prev + self.B @ self.u + self.f


@dataclass(frozen=True)
class ModelSequence:
    """Initial state plus one :class:`StepModel` per filter step."""

    initial: GaussianState
    steps: tuple

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise DimensionMismatch("ModelSequence needs at least one step")
        n = self.initial.dim
        for k, s in enumerate(self.steps):
            if s.n_x != n:
                raise DimensionMismatch(f"step {k}: state dim {s.n_x} != {n}")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_x(self) -> int:
        return self.initial.dim


@dataclass(frozen=True)
class FilterTrace:
    """Everything one filter pass produced, step index k = 1..n_t.

    Arrays are indexed [k-1]; ``initial`` holds (x[0], P[0]).  ``innovation``
    is the predicted-state innovation z - H x_pred; ``hx_post`` is H x_post,
    kept so losses need no model access.
    """

    initial: GaussianState
    x_pred: np.ndarray
    P_pred: np.ndarray
    K: np.ndarray
    S: np.ndarray
    innovation: np.ndarray
    x_post: np.ndarray
    P_post: np.ndarray
    hx_post: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.x_post.shape[0]

    @property
    def n_x(self) -> int:
        return self.x_post.shape[1]


def predict(state: GaussianState, step: StepModel) -> GaussianState:
    """Time update: propagate mean and covariance one step.

    Parameters
    ----------
    state : posterior at k-1.
    step : model for step k.

    Returns
    -------
    GaussianState with x' = F x + B u + f and P' = F P F^T + Q.
    """
    x = step.drift(state.x)
    P = step.F @ state.P @ step.F.T + step.Q
    return GaussianState(x, 0.5 * (P + P.T))


def gain(P_pred: np.ndarray, step: StepModel) -> tuple[np.ndarray, np.ndarray]:
    """Kalman gain and innovation covariance for a predicted covariance.

    Returns
    -------
    (K, S) with S = H P' H^T + R and K = P' H^T S^{-1}.  The solve is
    S^T K^T = H P'^T, LU with partial pivoting.
    """
    H = step.H
    S = H @ P_pred @ H.T + step.R
    K = solve(S.T, H @ P_pred.T).T
    return K, S


def update(state_pred: GaussianState, step: StepModel, z: np.ndarray) -> tuple[GaussianState, np.ndarray, np.ndarray, np.ndarray]:
    """Measurement update.

    Returns
    -------
    (posterior, K, S, innovation).  The covariance update is the short form
    (I - K H) P', re-symmetrized; with the optimal gain it coincides with
    the Joseph form.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != step.n_z:
        raise DimensionMismatch(f"obs length {z.size} vs model n_z {step.n_z}")
    K, S = gain(state_pred.P, step)
    nu = z - step.H @ state_pred.x
    x = state_pred.x + K @ nu
    P = (np.eye(step.n_x) - K @ step.H) @ state_pred.P
    return GaussianState(x, 0.5 * (P + P.T)), K, S, nu


def run_filter(model: ModelSequence, obs: np.ndarray) -> FilterTrace:
    """Run the filter over the whole observation sequence.

    Parameters
    ----------
    model : initial state and per-step models.
    obs : (n_t, n_z) array, row k-1 observed after step k's propagation.

    Returns
    -------
    FilterTrace
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_t = model.n_steps
    if obs.shape[0] != n_t:
        raise DimensionMismatch(f"{obs.shape[0]} observations for {n_t} steps")
    x_pred, P_pred, Ks, Ss, nus, x_post, P_post, hx = [], [], [], [], [], [], [], []
    state = model.initial
    for k, step in enumerate(model.steps):
        pred = predict(state, step)
        state, K, S, nu = update(pred, step, obs[k])
        x_pred.append(pred.x)
        P_pred.append(pred.P)
        Ks.append(K)
        Ss.append(S)
        nus.append(nu)
        x_post.append(state.x)
        P_post.append(state.P)
        hx.append(step.H @ state.x)
    return FilterTrace(
        initial=model.initial,
        x_pred=np.array(x_pred),
        P_pred=np.array(P_pred),
        K=np.array(Ks),
        S=np.array(Ss),
        innovation=np.array(nus),
        x_post=np.array(x_post),
        P_post=np.array(P_post),
        hx_post=np.array(hx),
    )


def run_filter_relinearized(initial: GaussianState, obs: np.ndarray, step_builder) -> tuple[FilterTrace, ModelSequence]:
    """Filter where each step's model is built from the previous posterior.

    ``step_builder(k, x_prev)`` returns the :class:`StepModel` for step k
    (k = 1..n_t) linearized at the current estimate.  Used when the
    transition operator depends on the state (learned diffusivity, closure
    models).  Returns the trace together with the materialized sequence so
    downstream code can treat the run as an ordinary linear pass.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    state = initial
    steps = []
    for k in range(obs.shape[0]):
        steps.append(step_builder(k + 1, state.x))
        pred = predict(state, steps[-1])
        state, _, _, _ = update(pred, steps[-1], obs[k])
    model = ModelSequence(initial, steps)
    return run_filter(model, obs), model


def residual_step(
    x_prev: np.ndarray,
    P_prev: np.ndarray,
    x_k: np.ndarray,
    P_k: np.ndarray,
    step: StepModel,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Residual of one filter step at arbitrary trace values.

    The gain is recomputed from (P_prev, step), so the residual is an
    explicit function of the previous state/covariance and the step model;
    evaluated at a filter's own trace it vanishes identically.

    Returns
    -------
    (r_x, R_P) : state residual (n_x,) and covariance residual (n_x, n_x).
    """
    P_pred = step.F @ P_prev @ step.F.T + step.Q
    K, _ = gain(P_pred, step)
    ikh = np.eye(step.n_x) - K @ step.H
    r_x = x_k - ikh @ (step.F @ x_prev + step.B @ step.u + step.f) - K @ z
    R_P = P_k - ikh @ P_pred
    return r_x, R_P


def residual(trace: FilterTrace, model: ModelSequence, obs: np.ndarray) -> np.ndarray:
    """Stacked residual [r_x[k]; vec(R_P[k])] for k = 1..n_t.

    Zero (to roundoff) when ``trace`` came from :func:`run_filter` on the
    same model and observations.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_x = model.n_x
    out = np.empty((trace.n_steps, n_x + n_x * n_x))
    x_prev, P_prev = trace.initial.x, trace.initial.P
    for k in range(trace.n_steps):
        r_x, R_P = residual_step(
            x_prev, P_prev, trace.x_post[k], trace.P_post[k], model.steps[k], obs[k]
        )
        out[k, :n_x] = r_x
        out[k, n_x:] = vec(R_P)
        x_prev, P_prev = trace.x_post[k], trace.P_post[k]
    return out.reshape(-1)


def loss(trace: FilterTrace, obs: np.ndarray, mode: str = "plain", whitening=None) -> float:
    """Observation-mismatch loss of a filter run.

    Parameters
    ----------
    mode : "plain" sums squared posterior mismatches ||H x_post - z||^2;
        "whitened" averages ||S^{-1/2} (z - H x_post)||^2 over steps, with
        S^{-1/2} the symmetric inverse square root of the innovation
        covariance (eigenvalues clamped at 1e-14 of the largest);
        "innovation" sums squared predicted-measurement mismatches
        ||z - H x_pred||^2.  The posterior modes reward raising the gain
        (the update pins H x_post on z as S grows), so identification
        experiments that must recover dynamics at high noise use the
        innovation mode, which penalizes the prediction itself.
    whitening : optional precomputed list of S^{-1/2} factors; when given,
        the whitened mode uses these fixed weights instead of the trace's
        own S (frozen-uncertainty evaluation).
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[0] != trace.n_steps:
        raise DimensionMismatch(f"{obs.shape[0]} observations for {trace.n_steps} steps")
    if mode == "innovation":
        return float(np.sum(trace.innovation * trace.innovation))
    mismatch = obs - trace.hx_post
    if mode == "plain":
        return float(np.sum(mismatch * mismatch))
    if mode == "whitened":
        if whitening is None:
            whitening = [sym_inv_sqrt(trace.S[k]) for k in range(trace.n_steps)]
        total = 0.0
        for k in range(trace.n_steps):
            w = whitening[k] @ mismatch[k]
            total += float(w @ w)
        return total / trace.n_steps
    raise ValueError(f"unknown loss mode {mode!r}")


def trace_to_csv(trace: FilterTrace, path) -> None:
    """Write the trace as CSV: k, x_pred, x_post, diag P_pred, diag P_post, innovation."""
    n_x = trace.n_x
    n_z = trace.innovation.shape[1]
    header = (
        ["k"]
        + [f"x_pred_{i}" for i in range(n_x)]
        + [f"x_post_{i}" for i in range(n_x)]
        + [f"P_pred_diag_{i}" for i in range(n_x)]
        + [f"P_post_diag_{i}" for i in range(n_x)]
        + [f"innov_{i}" for i in range(n_z)]
    )
    with open(path, "w", newline="") as fh:
        fh.write("# adjkf-csv v1 filter-trace\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(trace.n_steps):
            row = (
                [k + 1]
                + [f"{v:.17g}" for v in trace.x_pred[k]]
                + [f"{v:.17g}" for v in trace.x_post[k]]
                + [f"{v:.17g}" for v in np.diag(trace.P_pred[k])]
                + [f"{v:.17g}" for v in np.diag(trace.P_post[k])]
                + [f"{v:.17g}" for v in trace.innovation[k]]
            )
            writer.writerow(row)
