"""Dense linear-algebra and sampling utilities used by the filter stack.

Conventions, fixed package-wide:

* matrices are 2-d float64 ndarrays, vectors are 1-d float64 ndarrays;
* ``vec`` stacks columns (column-major), so ``vec(A X B) = kron(B.T, A) vec(X)``;
* randomness comes from numpy's Philox bit generator, a counter-based
  64-bit generator whose streams are reproducible bit-for-bit across
  platforms for a given integer seed.
"""

from __future__ import annotations

import hashlib
import warnings

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPd, NotPsd, SingularMatrix

__all__ = [
    "vec",
    "unvec",
    "kron",
    "solve",
    "sym_inv_sqrt",
    "psd_factor",
    "make_rng",
    "derive_seed",
    "normal_sample",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a read-only, F-ordered float64 matrix.

    F order makes ``vec`` a zero-copy view; read-only protects shared
    model/trace state from accidental mutation downstream.
    """
    m = np.array(a, dtype=float, order="F")
    if m.ndim != 2:
        raise DimensionMismatch(f"{name}: expected 2-d array, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    m.setflags(write=False)
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Return ``a`` as a read-only float64 vector."""
    v = np.array(a, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: non-finite entries")
    v.setflags(write=False)
    return v


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of a matrix.

    Returns a view when ``m`` is F-contiguous, a copy otherwise.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimensionMismatch(f"vec: expected matrix, got ndim={m.ndim}")
    return m.reshape(-1, order="F")

def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec` for the given shape."""
    v = np.asarray(v).reshape(-1)
    if v.size != rows * cols:
        raise DimensionMismatch(f"unvec: {v.size} entries cannot fill {rows}x{cols}")
    return v.reshape(rows, cols, order="F")


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product, (i,j) block = a[i,j] * b."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def solve(a: np.ndarray, b: np.ndarray, jitter_scale: float = 0.0) -> np.ndarray:
    """Solve ``a x = b`` by LU with partial pivoting.

    Parameters
    ----------
    a : (n, n) matrix.
    b : (n,) vector or (n, m) matrix of right-hand sides.
    jitter_scale : if nonzero, ``jitter_scale * trace(a)/n`` is added to the
        diagonal before factorizing (symmetric regularization for nearly
        singular covariance solves).

    Raises
    ------
    SingularMatrix
        when any U pivot falls below ``1e-14 * max|a|``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"solve: matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatch(f"solve: rhs length {b.shape[0]} != n {a.shape[0]}")
    n = a.shape[0]
    if jitter_scale != 0.0:
        a = a + (jitter_scale * np.trace(a) / n) * np.eye(n)
    with warnings.catch_warnings():
        # singularity is detected below via the pivot check and raised as our own error
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    threshold = 1e-14 * max(np.max(np.abs(a)), 1e-300)
    if np.any(pivots < threshold):
        raise SingularMatrix(f"solve: pivot {pivots.min():.3e} below {threshold:.3e}")
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def sym_inv_sqrt(s: np.ndarray, clamp: float = 1e-14) -> np.ndarray:
    """Inverse matrix square root of a symmetric PD matrix.

    Eigenvalues below ``clamp * max(eigenvalue)`` are raised to that floor
    before inversion, which keeps whitening stable when ``s`` is nearly
    singular.

    Raises
    ------
    NotPd
        if the largest eigenvalue is not positive.
    """
    s = np.asarray(s, dtype=float)
    w, u = np.linalg.eigh(0.5 * (s + s.T))
    if w[-1] <= 0.0:
        raise NotPd("sym_inv_sqrt: no positive eigenvalue")
    w = np.maximum(w, clamp * w[-1])
    return (u / np.sqrt(w)) @ u.T


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = cov for a PSD matrix.

    Tries Cholesky first, escalating through tiny diagonal jitter; falls
    back to a symmetric eigenvalue factor for singular PSD inputs (zero
    covariance is legal and yields L = 0).

    Raises
    ------
    NotPsd
        if an eigenvalue is materially negative.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.ndim != 2 or cov.shape[1] != n:
        raise DimensionMismatch(f"psd_factor: expected square matrix, got {cov.shape}")
    scale = np.trace(cov) / max(n, 1)
    for jitter in (0.0, 1e-14, 1e-12, 1e-10):
        try:
            return np.linalg.cholesky(cov + (jitter * scale) * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    w, u = np.linalg.eigh(0.5 * (cov + cov.T))
    if w[0] < -1e-10 * max(abs(w[-1]), 1.0):
        raise NotPsd(f"psd_factor: eigenvalue {w[0]:.3e} is negative")
    return u * np.sqrt(np.maximum(w, 0.0))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64) for the given integer seed."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(root_seed: int, *labels: object) -> int:
    """Derive an independent 64-bit sub-seed from a root seed and labels.

    The derivation is SHA-256 over ``"<root>|<label>|...|<label>"``, low
    8 bytes little-endian, so every (experiment, sigma, purpose) tuple gets
    a reproducible stream of its own and partial reruns match full runs.
    """
    text = "|".join([str(int(root_seed))] + [str(l) for l in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def normal_sample(
    rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, size: int | None = None
) -> np.ndarray:
    """Draw from N(mean, cov) as ``mean + L xi`` with ``L`` from :func:`psd_factor`.

    Returns shape (n,) for ``size=None``, else (size, n).  Consumes exactly
    ``n`` (or ``size*n``) standard normals from ``rng``.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    n = mean.size
    if cov.shape != (n, n):
        raise DimensionMismatch(f"normal_sample: cov {cov.shape} vs mean length {n}")
    factor = psd_factor(cov)
    if size is None:
        return mean + factor @ rng.standard_normal(n)
    xi = rng.standard_normal((size, n))
    return mean + xi @ factor.T
