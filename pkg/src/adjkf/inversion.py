"""Field inversion of transition operators by adjoint-driven L-BFGS.

A design object maps a flat parameter vector onto the step models of a
:class:`~adjkf.kalman.ModelSequence`; three variants are provided:

* :class:`TiedTransition` — one transition matrix shared by every step;
* :class:`PerStepTransition` — an independent transition matrix per step;
* :class:`DiffusivityTable` — nodal values of a piecewise-linear
  diffusivity d(v) on [0, 1], turned into per-step PDE operators at frozen
  linearization states.

The optimizer is a from-scratch L-BFGS (two-loop recursion) with a strong
Wolfe line search.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .adjoint import gradient
from .benchmarks import AllenCahnConfig, ac_operator, periodic_laplacian
from .errors import DimensionMismatch, NonFiniteLoss, NotPsd, SingularMatrix
from .kalman import ModelSequence, loss, run_filter
from .linalg import unvec, vec

__all__ = [
    "TiedTransition",
    "PerStepTransition",
    "DiffusivityTable",
    "perturbed_transition",
    "InversionProblem",
    "LbfgsOptions",
    "InversionResult",
    "minimize",
    "design_to_csv",
    "history_to_csv",
]


@dataclass(frozen=True)
class TiedTransition:
    """One transition matrix shared by all steps; parameters are vec(F)."""

    F: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F", np.array(self.F, dtype=float))
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise DimensionMismatch(f"F must be square, got {self.F.shape}")

    def flatten(self) -> np.ndarray:
        return vec(self.F).copy()

    def with_flat(self, theta: np.ndarray) -> "TiedTransition":
        n = self.F.shape[0]
        return TiedTransition(unvec(np.asarray(theta, dtype=float), n, n))

    def build_step(self, base_steps, k: int):
        return base_steps[k - 1].replace_F(self.F)

    def build(self, base: ModelSequence) -> ModelSequence:
        steps = [self.build_step(base.steps, k) for k in range(1, base.n_steps + 1)]
        return ModelSequence(base.initial, steps)

    def grad_from_F(self, Gs) -> np.ndarray:
        # the shared matrix enters every step's residual
        return vec(np.sum(Gs, axis=0))

    def penalty(self) -> float:
        return 0.0

    def penalty_grad(self) -> np.ndarray:
        return np.zeros(self.F.size)


@dataclass(frozen=True)
class PerStepTransition:
    """Independent transition matrix per step; parameters are stacked vec(F_k)."""

    Fs: tuple

    def __post_init__(self):
        Fs = tuple(np.array(F, dtype=float) for F in self.Fs)
        n = Fs[0].shape[0]
        for F in Fs:
            if F.shape != (n, n):
                raise DimensionMismatch("all step transitions must share one square shape")
        object.__setattr__(self, "Fs", Fs)

    @property
    def n_x(self) -> int:
        return self.Fs[0].shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([vec(F) for F in self.Fs])

    def with_flat(self, theta: np.ndarray) -> "PerStepTransition":
        theta = np.asarray(theta, dtype=float)
        n = self.n_x
        block = n * n
        if theta.size != block * len(self.Fs):
            raise DimensionMismatch(f"flat length {theta.size} != {block * len(self.Fs)}")
        return PerStepTransition(
            tuple(unvec(theta[i * block : (i + 1) * block], n, n) for i in range(len(self.Fs)))
        )

    def build_step(self, base_steps, k: int):
        return base_steps[k - 1].replace_F(self.Fs[k - 1])

    def build(self, base: ModelSequence) -> ModelSequence:
        if base.n_steps != len(self.Fs):
            raise DimensionMismatch(f"{len(self.Fs)} transitions for {base.n_steps} steps")
        steps = [self.build_step(base.steps, k) for k in range(1, base.n_steps + 1)]
        return ModelSequence(base.initial, steps)

    def grad_from_F(self, Gs) -> np.ndarray:
        # each matrix touches exactly its own step
        return np.concatenate([vec(G) for G in Gs])

    def penalty(self) -> float:
        return 0.0

    def penalty_grad(self) -> np.ndarray:
        return np.zeros(self.flatten().size)


@dataclass(frozen=True)
class DiffusivityTable:
    """Piecewise-linear diffusivity table on uniform nodes over [0, 1].

    Evaluation clamps outside the node range (constant extrapolation).  The
    per-step operator is built at frozen linearization states, one row per
    step; refreshing those states between optimization rounds is the
    caller's job.  A soft log-barrier keeps every nodal value positive.
    """

    values: np.ndarray
    cfg: AllenCahnConfig
    lin_states: np.ndarray
    barrier_weight: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "values", np.array(self.values, dtype=float))
        object.__setattr__(self, "lin_states", np.array(self.lin_states, dtype=float))
        if self.values.ndim != 1:
            raise DimensionMismatch("table values must be a vector")
        if self.lin_states.shape != (self.cfg.n_steps, self.cfg.n):
            raise DimensionMismatch(
                f"lin_states {self.lin_states.shape}, expected {(self.cfg.n_steps, self.cfg.n)}"
            )

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.values.size)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        """Interpolated diffusivity at states v."""
        return np.interp(np.asarray(v, dtype=float), self.nodes, self.values)

    def flatten(self) -> np.ndarray:
        return self.values.copy()

    def with_flat(self, theta: np.ndarray) -> "DiffusivityTable":
        return replace(self, values=np.asarray(theta, dtype=float))

    def with_lin_states(self, lin_states: np.ndarray) -> "DiffusivityTable":
        return replace(self, lin_states=np.asarray(lin_states, dtype=float))

    def build_step(self, base_steps, k: int):
        v = self.lin_states[k - 1]
        F, _ = ac_operator(self(v), v, self.cfg)
        return base_steps[k - 1].replace_F(F)

    def build(self, base: ModelSequence) -> ModelSequence:
        steps = [self.build_step(base.steps, k) for k in range(1, base.n_steps + 1)]
        return ModelSequence(base.initial, steps)

    def _hat_weights(self, v: np.ndarray) -> np.ndarray:
        """Interpolation weight of every node at every component of v."""
        nodes = self.nodes
        h = nodes[1] - nodes[0]
        vc = np.clip(np.asarray(v, dtype=float), nodes[0], nodes[-1])
        idx = np.minimum(((vc - nodes[0]) / h).astype(int), nodes.size - 2)
        t = (vc - nodes[idx]) / h
        W = np.zeros((vc.size, nodes.size))
        rows = np.arange(vc.size)
        W[rows, idx] = 1.0 - t
        W[rows, idx + 1] = t
        return W

    def grad_from_F(self, Gs) -> np.ndarray:
        # dF_k/dtheta_j = dt/dx^2 diag(w_j(v_k)) D2, so each step adds the
        # node weights times the row dots of G with the Laplacian stencil
        D2 = periodic_laplacian(self.cfg.n)
        scale = self.cfg.dt / self.cfg.dx**2
        g = np.zeros(self.values.size)
        for k, G in enumerate(Gs, start=1):
            v = self.lin_states[k - 1]
            g += scale * (self._hat_weights(v).T @ np.sum(G * D2, axis=1))
        return g

    def penalty(self) -> float:
        if np.any(self.values <= 0.0):
            return np.inf
        return -self.barrier_weight * float(np.sum(np.log(self.values)))

    def penalty_grad(self) -> np.ndarray:
        return -self.barrier_weight / self.values

    @staticmethod
    def feasible_step(theta: np.ndarray, direction: np.ndarray) -> float:
        """Largest step keeping every nodal value strictly positive.

        99% of the distance to the positivity wall; the remaining margin is
        where the log barrier takes over.
        """
        falling = direction < 0.0
        if not np.any(falling):
            return np.inf
        return 0.99 * float(np.min(theta[falling] / -direction[falling]))


def perturbed_transition(F_base: np.ndarray, rng, scale: float = 0.05) -> np.ndarray:
    """Initial guess: entrywise N(0, scale^2) perturbation of a base operator."""
    F_base = np.asarray(F_base, dtype=float)
    return F_base + scale * rng.standard_normal(F_base.shape)


class InversionProblem:
    """Callable objective theta -> (loss, grad) over a design's flat parameters.

    Runs the filter on the design-built model, evaluates the configured
    loss plus the design's penalty, and differentiates through the adjoint.
    Tracks the per-parameter maximum of the data-misfit gradient magnitude
    seen so far (``data_grad_max``), which is what identifiability of table
    entries is judged on; the barrier gradient is excluded deliberately.
    """

    def __init__(self, design, base_model: ModelSequence, obs, mode: str = "plain",
                 whitening=None, s_cap: float = 50.0):
        if mode == "whitened" and whitening is None:
            raise ValueError("whitened objectives need frozen whitening weights")
        self.design = design
        self.base_model = base_model
        self.obs = np.atleast_2d(np.asarray(obs, dtype=float))
        self.mode = mode
        self.whitening = whitening
        # reject traces whose final-step innovation covariance exceeds s_cap
        # times the base model's own.  A diverging Riccati recursion drives
        # the gain to pin x_post on z, which zeroes the mismatch loss and
        # creates a spurious minimum at absurdly unstable operators; a sane
        # filter instead settles S near the starting model's steady state,
        # so the last step separates the two regimes even when a large prior
        # makes early innovations legitimately wide.  Scaling by the base
        # trace rather than R keeps the bound meaningful at any process
        # noise level
        base_trace = run_filter(base_model, self.obs)
        self.s_cap = float(s_cap) * float(np.max(np.abs(base_trace.S[-1])))
        self.data_grad_max = np.zeros(design.flatten().size)
        self.n_evals = 0

    def at(self, theta: np.ndarray):
        return self.design.with_flat(theta)

    @property
    def max_step(self):
        """The design's feasible-step bound, when it has one (barrier variants)."""
        return getattr(self.design, "feasible_step", None)

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        self.n_evals += 1
        design = self.at(theta)
        penalty = design.penalty()
        if not np.isfinite(penalty):
            # infeasible point: the line search treats inf as an Armijo failure
            return np.inf, np.full(theta.size, np.nan)
        try:
            model = design.build(self.base_model)
            trace = run_filter(model, self.obs)
            value = loss(trace, self.obs, self.mode, whitening=self.whitening) + penalty
            data_grad = gradient(trace, model, design, self.obs, self.mode, whitening=self.whitening)
        except (SingularMatrix, NotPsd, NonFiniteLoss, FloatingPointError, ValueError):
            # a trial design can blow the filter up (unstable operator,
            # overflowed covariance); report it as a bad point rather than
            # aborting the search
            return np.inf, np.full(theta.size, np.nan)
        if not np.isfinite(value) or float(np.max(np.abs(trace.S[-1]))) > self.s_cap:
            return np.inf, np.full(theta.size, np.nan)
        self.data_grad_max = np.maximum(self.data_grad_max, np.abs(data_grad))
        return value, data_grad + design.penalty_grad()


@dataclass(frozen=True)
class LbfgsOptions:
    """L-BFGS knobs; defaults suit the shipped experiments."""

    memory: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-8        # on the max-norm of the gradient
    c1: float = 1e-4              # Armijo constant
    c2: float = 0.9               # strong Wolfe curvature constant
    ls_max: int = 30              # line-search evaluations per iteration
    scale_init: bool = True       # gamma-scale the implicit initial Hessian


@dataclass(frozen=True)
class InversionResult:
    """Optimization outcome; loss_history covers the accepted iterates."""

    theta: np.ndarray
    value: float
    grad: np.ndarray
    loss_history: np.ndarray
    grad_norm_history: np.ndarray
    n_iters: int
    n_evals: int
    termination: str              # "converged" | "max_iter" | "line_search_failed"


def _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    """Minimizer of the cubic Hermite fit on [a_lo, a_hi]; exact on quadratics."""
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - g_lo * g_hi
    if disc < 0.0:
        return None
    d2 = np.sign(a_hi - a_lo) * np.sqrt(disc)
    denom = g_hi - g_lo + 2.0 * d2
    if denom == 0.0:
        return None
    return a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom


def _zoom(phi, a_lo, f_lo, g_lo, a_hi, f_hi, g_hi, f0, g0, c1, c2, budget):
    """Strong-Wolfe zoom on a bracket; a_lo always holds the best Armijo point."""
    for _ in range(budget):
        trial = None
        if np.isfinite(f_hi) and np.isfinite(g_hi):
            trial = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
        width = hi - lo
        if trial is None or not np.isfinite(trial) or trial <= lo + 1e-12 * width or trial >= hi - 1e-12 * width:
            trial = 0.5 * (a_lo + a_hi)
        f, g = phi(trial)
        if not np.isfinite(f) or f > f0 + c1 * trial * g0 or f >= f_lo:
            a_hi, f_hi, g_hi = trial, f, g
        else:
            if abs(g) <= -c2 * g0:
                return trial
            if g * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = trial, f, g
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    return None


def _wolfe_search(fun, x, f0, grad0, direction, opts: LbfgsOptions, max_step=None):
    """Strong Wolfe line search (bracket then zoom).

    Returns (alpha, f_alpha, grad_alpha) or None on failure.  Non-finite
    trial values count as Armijo violations, which shrinks the step.
    ``max_step(x, direction)`` caps every trial: for barrier objectives it
    keeps iterates a fixed fraction away from the feasibility wall, so a
    single step cannot jump over a barrier minimum onto the wall.
    """
    g0 = float(grad0 @ direction)
    if g0 >= 0.0:
        return None
    cap = np.inf if max_step is None else float(max_step(x, direction))
    if cap <= 0.0:
        return None
    cache: dict[float, tuple[float, np.ndarray]] = {}

    def phi(alpha):
        f, grad = fun(x + alpha * direction)
        cache[alpha] = (f, grad)
        slope = float(grad @ direction) if np.all(np.isfinite(grad)) else np.nan
        return f, slope

    def accept(alpha, at_cap=False):
        f, grad = cache[alpha]
        slope = float(grad @ direction)
        armijo = f <= f0 + opts.c1 * alpha * g0 + 1e-14 * max(1.0, abs(f0))
        curvature = abs(slope) <= -opts.c2 * g0 + 1e-14 * abs(g0)
        # a boundary-capped step cannot reach the curvature point; Armijo
        # decrease is enough there, the next iteration restarts the search
        assert armijo and (curvature or at_cap), "accepted step must satisfy strong Wolfe conditions"
        return alpha, f, grad

    a_prev, f_prev, g_prev = 0.0, f0, g0
    alpha = min(1.0, cap)
    for i in range(opts.ls_max):
        f, g = phi(alpha)
        if not np.isfinite(f) or f > f0 + opts.c1 * alpha * g0 or (i > 0 and f >= f_prev):
            hit = _zoom(phi, a_prev, f_prev, g_prev, alpha, f, g, f0, g0, opts.c1, opts.c2, opts.ls_max)
            return accept(hit) if hit is not None else None
        if abs(g) <= -opts.c2 * g0:
            return accept(alpha)
        if g >= 0.0:
            hit = _zoom(phi, alpha, f, g, a_prev, f_prev, g_prev, f0, g0, opts.c1, opts.c2, opts.ls_max)
            return accept(hit) if hit is not None else None
        if alpha >= cap:
            return accept(alpha, at_cap=True)  # still descending at the boundary cap
        a_prev, f_prev, g_prev = alpha, f, g
        alpha = min(alpha * 2.0, cap)
    return None


def minimize(fun, x0: np.ndarray, opts: LbfgsOptions = LbfgsOptions(), max_step=None) -> InversionResult:
    """L-BFGS with two-loop recursion and strong Wolfe line search.

    Parameters
    ----------
    fun : callable theta -> (value, gradient).
    x0 : starting point.
    max_step : optional callable (theta, direction) -> largest allowed step;
        taken from ``fun.max_step`` when present.  Used by barrier
        objectives to keep iterates strictly feasible.

    The accepted-iterate loss history is non-increasing (Wolfe decrease);
    curvature pairs with s.y <= 1e-10 ||s|| ||y|| are skipped.  The run is
    fully deterministic.
    """
    if max_step is None:
        max_step = getattr(fun, "max_step", None)
    evals = 0

    def counted(theta):
        nonlocal evals
        evals += 1
        return fun(theta)

    x = np.asarray(x0, dtype=float).copy()
    f, g = counted(x)
    if not np.isfinite(f):
        raise NonFiniteLoss("objective is non-finite at the starting point")
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    losses = [f]
    grad_norms = [float(np.max(np.abs(g)))]
    termination = "max_iter"
    iters_done = 0
    for _ in range(opts.max_iter):
        if grad_norms[-1] < opts.grad_tol:
            termination = "converged"
            break
        # two-loop recursion for the quasi-Newton direction
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_list and opts.scale_init:
            q *= (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
        for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        direction = -q
        if g @ direction >= 0.0:
            direction = -g
        hit = _wolfe_search(counted, x, f, g, direction, opts, max_step)
        if hit is None:
            termination = "line_search_failed"
            break
        alpha, f_new, g_new = hit
        x_new = x + alpha * direction
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > opts.memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x, f, g = x_new, f_new, g_new
        losses.append(f)
        grad_norms.append(float(np.max(np.abs(g))))
        iters_done += 1
    else:
        if grad_norms[-1] < opts.grad_tol:
            termination = "converged"
    return InversionResult(
        theta=x,
        value=f,
        grad=g,
        loss_history=np.array(losses),
        grad_norm_history=np.array(grad_norms),
        n_iters=iters_done,
        n_evals=evals,
        termination=termination,
    )


def design_to_csv(design, path) -> None:
    """Write design parameters as CSV.

    Transitions: step (0 = tied), row, col, value.  Tables: node, value.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(design, DiffusivityTable):
            fh.write("# adjkf-csv v1 diffusivity-table\n")
            writer.writerow(["v_node", "d_value"])
            for v, d in zip(design.nodes, design.values):
                writer.writerow([f"{v:.17g}", f"{d:.17g}"])
            return
        fh.write("# adjkf-csv v1 transition\n")
        writer.writerow(["step", "row", "col", "value"])
        if isinstance(design, TiedTransition):
            items = [(0, design.F)]
        else:
            items = [(k + 1, F) for k, F in enumerate(design.Fs)]
        for step, F in items:
            for i in range(F.shape[0]):
                for j in range(F.shape[1]):
                    writer.writerow([step, i, j, f"{F[i, j]:.17g}"])


def history_to_csv(result: InversionResult, path) -> None:
    """Write iteration history: iter, loss, grad_max_norm."""
    with open(path, "w", newline="") as fh:
        fh.write("# adjkf-csv v1 inversion-history\n")
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "grad_max_norm"])
        for i, (l, gn) in enumerate(zip(result.loss_history, result.grad_norm_history)):
            writer.writerow([i, f"{l:.17g}", f"{gn:.17g}"])
