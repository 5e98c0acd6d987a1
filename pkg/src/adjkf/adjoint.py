"""Adjoint differentiation of the Kalman filter residual.

Stack the augmented per-step variables y[k] = [x[k]; vec(P[k])].  The
residual of :func:`adjkf.kalman.residual` has a block lower-bidiagonal
Jacobian in y: identity blocks on the diagonal (each step's residual has
unit coefficient on its own state/covariance) and coupling blocks

    A_xx[k] = d r_x[k] / d x[k-1]        = -(I - K H) F
    A_xP[k] = d r_x[k] / d vec(P[k-1])   = -(nu^T S^-T H F) kron ((I - K H) F)
    A_Px[k] = d vec(R_P[k]) / d x[k-1]   = 0
    A_PP[k] = d vec(R_P[k]) / d vec(P[k-1])
            = ((P'^T H^T S^-T H - I) F) kron ((I - K H) F)

with P' = F P[k-1] F^T + Q the predicted covariance, S = H P' H^T + R,
and nu = z - H (F x[k-1] + B u + f) the predicted-state innovation.  The
x,P and P,P blocks follow from dK = (I - K H) dP' H^T S^{-1} and the
column-major identity vec(A X B) = (B^T kron A) vec(X).

Sensitivity of a scalar loss f(trace) to design parameters d solves the
transposed system (dr/dy)^T psi = df/dy backward in time and returns

    df/dd = partial f / partial d - psi^T (partial r / partial d).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .kalman import FilterTrace, ModelSequence, StepModel, residual_step
from .linalg import kron, solve, sym_inv_sqrt, unvec, vec

__all__ = [
    "block_xx_prev",
    "block_xP_prev",
    "block_PP_prev",
    "step_blocks",
    "step_gradient_F",
    "solve_adjoint",
    "loss_gradient_y",
    "gradient",
    "verify_blocks",
    "verify_report_to_csv",
]


def block_xx_prev(step: StepModel, K: np.ndarray) -> np.ndarray:
    """d r_x[k] / d x[k-1] = -(I - K H) F."""
    return -(np.eye(step.n_x) - K @ step.H) @ step.F


def block_xP_prev(step: StepModel, K: np.ndarray, S: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """d r_x[k] / d vec(P[k-1]), shape (n_x, n_x^2).

    Collapsed form of -(nu^T kron I) (S^-T H kron (I-KH)) (F kron F); the
    mixed-product rule turns the left pair into a row vector, leaving
    -(nu^T S^-T H F) kron ((I-KH) F).
    """
    ikh = np.eye(step.n_x) - K @ step.H
    a = solve(S.T, nu) @ step.H @ step.F           # row vector nu^T S^-T H F
    return -kron(a[None, :], ikh @ step.F)


def block_PP_prev(step: StepModel, K: np.ndarray, S: np.ndarray, P_pred: np.ndarray) -> np.ndarray:
    """d vec(R_P[k]) / d vec(P[k-1]), shape (n_x^2, n_x^2).

    ((P'^T H^T S^-T H - I) F) kron ((I - K H) F), P' the predicted
    covariance entering the gain.
    """
    ikh = np.eye(step.n_x) - K @ step.H
    left = (P_pred.T @ step.H.T @ solve(S.T, step.H) - np.eye(step.n_x)) @ step.F
    return kron(left, ikh @ step.F)


def step_blocks(trace: FilterTrace, model: ModelSequence, k: int) -> dict:
    """All nonzero coupling blocks of step k (1-based) w.r.t. step k-1."""
    i = k - 1
    step = model.steps[i]
    K, S, nu = trace.K[i], trace.S[i], trace.innovation[i]
    return {
        "A_xx": block_xx_prev(step, K),
        "A_xP": block_xP_prev(step, K, S, nu),
        "A_PP": block_PP_prev(step, K, S, trace.P_pred[i]),
    }


def solve_adjoint(trace: FilterTrace, model: ModelSequence, rhs: list) -> list:
    """Solve (dr/dy)^T psi = rhs by backward substitution.

    Parameters
    ----------
    rhs : list of n_t vectors of length n_x + n_x^2 (df/dy per step).

    Returns
    -------
    list of adjoint vectors psi[k], same shapes.  The transposed system is
    block upper-bidiagonal with identity diagonal, so

        psi[n_t] = rhs[n_t]
        psi[k]   = rhs[k] - A[k+1,k]^T psi[k+1].

    The Kronecker-structured blocks are applied in matrix form, never
    materialized: kron(L, R)^T vec(Psi) = vec(R^T Psi L) and the rank-one
    x,P coupling becomes an outer product.
    """
    n_t, n_x = trace.n_steps, trace.n_x
    n_aug = n_x + n_x * n_x
    if len(rhs) != n_t:
        raise DimensionMismatch(f"{len(rhs)} rhs vectors for {n_t} steps")
    psi = [None] * n_t
    psi[-1] = np.asarray(rhs[-1], dtype=float).copy()
    eye = np.eye(n_x)
    for k in range(n_t - 1, 0, -1):
        step = model.steps[k]
        K, S, nu, P_pred = trace.K[k], trace.S[k], trace.innovation[k], trace.P_pred[k]
        ikhf = (eye - K @ step.H) @ step.F
        a = step.F.T @ (step.H.T @ solve(S.T, nu))
        L = (P_pred.T @ step.H.T @ solve(S.T, step.H) - eye) @ step.F
        nxt_x = psi[k][:n_x]
        nxt_P = unvec(psi[k][n_x:], n_x, n_x)
        cur = np.asarray(rhs[k - 1], dtype=float).copy()
        if cur.size != n_aug:
            raise DimensionMismatch(f"rhs[{k-1}] has length {cur.size}, expected {n_aug}")
        bt_psi = ikhf.T @ nxt_x
        cur[:n_x] += bt_psi                                   # -A_xx^T psi
        cur[n_x:] += vec(np.outer(bt_psi, a))                 # -A_xP^T psi
        cur[n_x:] -= vec(ikhf.T @ nxt_P @ L)                  # -A_PP^T psi
        psi[k - 1] = cur
    return psi


def loss_gradient_y(trace: FilterTrace, model: ModelSequence, obs: np.ndarray, mode: str, whitening=None) -> list:
    """df/dy[k] for the supported losses, as the adjoint right-hand side.

    All supported losses touch only the state part of y; the covariance
    part is zero (for the whitened loss the weights are frozen by
    construction).  The posterior modes load slot k with the step-k
    mismatch; the innovation mode loads slot k-1, because the step-k
    innovation z - H (F x[k-1] + B u + f) is a function of the previous
    posterior (the k=1 term touches only the fixed initial state).
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_x = trace.n_x
    n_t = trace.n_steps
    if mode == "whitened" and whitening is None:
        whitening = [sym_inv_sqrt(trace.S[k]) for k in range(n_t)]
    rhs = [np.zeros(n_x + n_x * n_x) for _ in range(n_t)]
    for k in range(n_t):
        H = model.steps[k].H
        if mode == "plain":
            mismatch = obs[k] - trace.hx_post[k]
            rhs[k][:n_x] = -2.0 * (H.T @ mismatch)
        elif mode == "whitened":
            mismatch = obs[k] - trace.hx_post[k]
            w = whitening[k]
            rhs[k][:n_x] = -(2.0 / n_t) * (H.T @ (w.T @ (w @ mismatch)))
        elif mode == "innovation":
            if k > 0:
                F = model.steps[k].F
                rhs[k - 1][:n_x] += -2.0 * (F.T @ (H.T @ trace.innovation[k]))
        else:
            raise ValueError(f"unknown loss mode {mode!r}")
    return rhs


def step_gradient_F(trace: FilterTrace, model: ModelSequence, k: int, psi_x: np.ndarray, psi_P: np.ndarray) -> np.ndarray:
    """d(psi_k . r_k)/dF_k as an n_x x n_x matrix, holding y fixed.

    With J = I - KH, M = P[k-1], a = J^T psi_x, b = H^T S^-1 nu,
    C = H^T S^-1 H P' and Psi = unvec(psi_P),

        Gamma = -a b^T + J^T Psi (C^T - I)
        G     = -a x[k-1]^T + (Gamma + Gamma^T) F M.

    Gamma collects the sensitivity through the predicted covariance; the
    gain term again uses dK = J dP' H^T S^-1.
    """
    i = k - 1
    step = model.steps[i]
    n_x = step.n_x
    K, S, nu, P_pred = trace.K[i], trace.S[i], trace.innovation[i], trace.P_pred[i]
    x_prev = trace.x_post[i - 1] if i > 0 else trace.initial.x
    P_prev = trace.P_post[i - 1] if i > 0 else trace.initial.P
    eye = np.eye(n_x)
    J = eye - K @ step.H
    Psi = unvec(psi_P, n_x, n_x)
    a = J.T @ psi_x
    b = step.H.T @ solve(S.T, nu)
    C = step.H.T @ solve(S.T, step.H) @ P_pred
    Gamma = -np.outer(a, b) + J.T @ Psi @ (C.T - eye)
    return -np.outer(a, x_prev) + (Gamma + Gamma.T) @ step.F @ P_prev


def gradient(
    trace: FilterTrace,
    model: ModelSequence,
    design,
    obs: np.ndarray,
    mode: str = "plain",
    whitening=None,
) -> np.ndarray:
    """Total derivative of the loss w.r.t. every design scalar.

    Backward adjoint solve, then the per-step transition-matrix gradients
    G_k = d(psi_k . r_k)/dF_k, chained through the design's own parameter
    map by ``design.grad_from_F`` (see :mod:`adjkf.inversion`).  The
    posterior losses have no direct design dependence, so their total
    derivative is -sum_k of the chained G_k; the innovation loss adds the
    explicit dJ/dF_k = -2 H^T nu_k x[k-1]^T term on top of the adjoint
    path.

    Returns
    -------
    flat gradient, one entry per design scalar.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_x = trace.n_x
    rhs = loss_gradient_y(trace, model, obs, mode, whitening)
    psi = solve_adjoint(trace, model, rhs)
    Gs = [
        step_gradient_F(trace, model, k, psi[k - 1][:n_x], psi[k - 1][n_x:])
        for k in range(1, trace.n_steps + 1)
    ]
    if mode == "innovation":
        for i in range(trace.n_steps):
            H = model.steps[i].H
            x_prev = trace.x_post[i - 1] if i > 0 else trace.initial.x
            # dJ/dF direct term enters with opposite sign to the adjoint
            # pieces, which the final negation flips back
            Gs[i] = Gs[i] + 2.0 * np.outer(H.T @ trace.innovation[i], x_prev)
    return -design.grad_from_F(Gs)


@dataclass(frozen=True)
class BlockCheck:
    """One row of a Jacobian verification report."""

    k: int
    block: str
    dist_fd1: float
    dist_fd12: float


def _fd_step_jacobian(x_prev, P_prev, x_k, P_k, step, z, eps: float):
    """Central-difference Jacobian of step k's residual w.r.t. x[k-1] and vec(P[k-1]).

    Covariance entries are perturbed independently (no symmetrization): the
    analytic blocks hold for arbitrary dP.
    """
    n_x = x_prev.size
    n_aug = n_x + n_x * n_x

    def stacked(xp, Pp):
        r_x, R_P = residual_step(xp, Pp, x_k, P_k, step, z)
        return np.concatenate([r_x, vec(R_P)])

    J = np.empty((n_aug, n_aug))
    for i in range(n_x):
        dx = np.zeros(n_x)
        dx[i] = eps
        J[:, i] = (stacked(x_prev + dx, P_prev) - stacked(x_prev - dx, P_prev)) / (2 * eps)
    for c in range(n_x):
        for r in range(n_x):
            dP = np.zeros((n_x, n_x))
            dP[r, c] = eps
            col = n_x + c * n_x + r  # column-major order of vec(P)
            J[:, col] = (stacked(x_prev, P_prev + dP) - stacked(x_prev, P_prev - dP)) / (2 * eps)
    return J


def verify_blocks(trace: FilterTrace, model: ModelSequence, obs: np.ndarray, eps: float = 1e-6) -> list:
    """Compare analytic Jacobian blocks against central differences.

    For every step the five block series are checked: the two identity
    diagonal blocks and the three nonzero coupling blocks.  Two FD stencils
    are used, ``eps`` and ``eps/2``; the second column of the report
    measures their mutual distance, a proxy for the FD noise floor.

    Returns
    -------
    list of :class:`BlockCheck`, 5 per step.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_x = trace.n_x
    x_all = np.vstack([trace.initial.x[None, :], trace.x_post])
    P_all = np.concatenate([trace.initial.P[None, :, :], trace.P_post])
    report = []
    for k in range(1, trace.n_steps + 1):
        i = k - 1
        step = model.steps[i]
        z = obs[i]
        args = (x_all[i], P_all[i], x_all[i + 1], P_all[i + 1], step, z)
        J1 = _fd_step_jacobian(*args, eps)
        J2 = _fd_step_jacobian(*args, eps / 2)
        blocks = step_blocks(trace, model, k)
        # diagonal blocks of the stacked Jacobian are exactly I
        JD1 = _fd_diag_jacobian(*args, eps)
        JD2 = _fd_diag_jacobian(*args, eps / 2)
        pieces = {
            "A_kk_xx": (np.eye(n_x), JD1[:n_x, :n_x], JD2[:n_x, :n_x]),
            "A_kk_PP": (np.eye(n_x * n_x), JD1[n_x:, n_x:], JD2[n_x:, n_x:]),
            "A_kk1_xx": (blocks["A_xx"], J1[:n_x, :n_x], J2[:n_x, :n_x]),
            "A_kk1_xP": (blocks["A_xP"], J1[:n_x, n_x:], J2[:n_x, n_x:]),
            "A_kk1_PP": (blocks["A_PP"], J1[n_x:, n_x:], J2[n_x:, n_x:]),
        }
        for name, (analytic, fd1, fd2) in pieces.items():
            report.append(
                BlockCheck(
                    k=k,
                    block=name,
                    dist_fd1=float(np.linalg.norm(analytic - fd1)),
                    dist_fd12=float(np.linalg.norm(fd1 - fd2)),
                )
            )
    return report


def _fd_diag_jacobian(x_prev, P_prev, x_k, P_k, step, z, eps: float):
    """Central-difference Jacobian of step k's residual w.r.t. its own y[k]."""
    n_x = x_k.size
    n_aug = n_x + n_x * n_x

    def stacked(xk, Pk):
        r_x, R_P = residual_step(x_prev, P_prev, xk, Pk, step, z)
        return np.concatenate([r_x, vec(R_P)])

    J = np.empty((n_aug, n_aug))
    for i in range(n_x):
        dx = np.zeros(n_x)
        dx[i] = eps
        J[:, i] = (stacked(x_k + dx, P_k) - stacked(x_k - dx, P_k)) / (2 * eps)
    for c in range(n_x):
        for r in range(n_x):
            dP = np.zeros((n_x, n_x))
            dP[r, c] = eps
            col = n_x + c * n_x + r
            J[:, col] = (stacked(x_k, P_k + dP) - stacked(x_k, P_k - dP)) / (2 * eps)
    return J


def verify_report_to_csv(report: list, path) -> None:
    """Write a verification report: k, block_name, frob_analytic_vs_fd1, frob_fd1_vs_fd2."""
    with open(path, "w", newline="") as fh:
        fh.write("# adjkf-csv v1 jacobian-verify\n")
        writer = csv.writer(fh)
        writer.writerow(["k", "block_name", "frob_analytic_vs_fd1", "frob_fd1_vs_fd2"])
        for row in report:
            writer.writerow([row.k, row.block, f"{row.dist_fd1:.17g}", f"{row.dist_fd12:.17g}"])
