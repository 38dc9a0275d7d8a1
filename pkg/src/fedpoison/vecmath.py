"""Flat-vector numerics shared by every other module.

All model parameters and client updates travel through the simulator as 1-D
float64 numpy arrays of a fixed dimension d. The helpers here are pure
functions; anything randomized takes an explicit seed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def as_vector(x) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractError("vector contains NaN or Inf")
    return v


def check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def project_to_ball(v: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Project v onto the closed L2 ball of the given radius around center.

    Points already inside the ball are returned unchanged (same object).
    """
    check_same_dim(v, center)
    if radius < 0:
        raise ContractError(f"radius must be nonnegative, got {radius}")
    delta = v - center
    dist = float(np.linalg.norm(delta))
    if dist <= radius:
        return v
    if dist == 0.0:
        return center.copy()
    return center + (radius / dist) * delta


def coordwise_stats(vs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and population standard deviation of a set of vectors."""
    if not vs:
        raise ContractError("coordwise_stats requires at least one vector")
    stack = np.stack(vs)
    return stack.mean(axis=0), stack.std(axis=0)


def pairwise_sq_dists(vs: list[np.ndarray]) -> np.ndarray:
    """Symmetric matrix of squared L2 distances, zero diagonal."""
    if len(vs) < 2:
        raise ContractError("pairwise_sq_dists requires at least two vectors")
    stack = np.stack(vs)
    sq_norms = np.sum(stack * stack, axis=1)
    d2 = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (stack @ stack.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between a and b; 0.0 when either vector is zero."""
    check_same_dim(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_right_singular_vector(
    rows: list[np.ndarray] | np.ndarray,
    iters: int = 50,
    seed: int = 0,
) -> tuple[np.ndarray, bool]:
    """Approximate top right singular vector of the row matrix by power iteration.

    Iterates v <- normalize(A^T (A v)) from a seeded random start. Returns
    (unit vector, degenerate flag); for an all-zero matrix the result is the
    first basis vector with the flag set.
    """
    a = np.asarray(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ContractError("need a matrix with at least two rows")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    d = a.shape[1]
    if not np.any(a):
        e1 = np.zeros(d)
        e1[0] = 1.0
        return e1, True

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start landed in the null space; draw a fresh direction
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
    return v, False
