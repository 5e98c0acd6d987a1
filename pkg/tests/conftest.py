"""Shared helpers: seeded random filter instances for property-style tests."""

import numpy as np

from adjkf.kalman import GaussianState, ModelSequence, StepModel
from adjkf.linalg import make_rng


def random_spd(rng, n, scale=1.0, floor=0.05):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + floor * np.eye(n))


def random_step(rng, n_x, n_z, n_u=1):
    """A random, stable-ish step model with PD noise covariances."""
    F = rng.standard_normal((n_x, n_x))
    rho = max(np.abs(np.linalg.eigvals(F)))
    F = 0.9 * F / max(rho, 1e-6)
    return StepModel(
        F=F,
        B=rng.standard_normal((n_x, n_u)),
        H=rng.standard_normal((n_z, n_x)),
        f=0.1 * rng.standard_normal(n_x),
        u=rng.standard_normal(n_u),
        Q=random_spd(rng, n_x, scale=0.1),
        R=random_spd(rng, n_z, scale=0.5),
    )


def random_model(seed, n_x=2, n_z=1, n_t=5, tied=False):
    """Random model sequence plus a compatible observation array."""
    rng = make_rng(seed)
    steps = []
    shared = random_step(rng, n_x, n_z)
    for _ in range(n_t):
        steps.append(shared if tied else random_step(rng, n_x, n_z))
    initial = GaussianState(rng.standard_normal(n_x), random_spd(rng, n_x, scale=0.5))
    model = ModelSequence(initial, steps)
    obs = rng.standard_normal((n_t, n_z))
    return model, obs
