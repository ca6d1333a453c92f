"""Dense linear algebra helpers and hypersphere primitives.

Matrices are plain float64 numpy arrays. Feature batches are stored
``n x d`` (one sample per row) and class weights ``d x c`` (one class
agent per column), matching the usual ``f @ W`` layout.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, ZeroNormRow

NORM_FLOOR = 1e-30


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every row of ``m`` to unit Euclidean norm."""
    a = as_matrix(m)
    norms = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(~(norms > NORM_FLOOR))
    if bad.size:
        raise ZeroNormRow(f"row {int(bad[0])} has norm {norms[bad[0]]!r}")
    return a / norms[:, None]


def l2_normalize_cols(m) -> np.ndarray:
    return l2_normalize_rows(as_matrix(m).T).T


def normalize_jacobian_apply(x, upstream_grad) -> np.ndarray:
    """Backpropagate ``upstream_grad`` through ``x -> x / |x|``.

    Returns ``(I - x~ x~^T) g / |x|``. Accepts a single vector or a batch
    of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if x.shape != g.shape:
        raise ShapeMismatch(f"x {x.shape} vs grad {g.shape}")
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(g)
    norms = np.linalg.norm(x2, axis=1)
    bad = np.flatnonzero(~(norms > NORM_FLOOR))
    if bad.size:
        raise ZeroNormRow(f"row {int(bad[0])} has norm {norms[bad[0]]!r}")
    unit = x2 / norms[:, None]
    radial = np.sum(unit * g2, axis=1)
    out = (g2 - radial[:, None] * unit) / norms[:, None]
    return out[0] if single else out


def cosine_matrix(feats, weights) -> np.ndarray:
    """Cosines between unit-norm feature rows and unit-norm weight columns."""
    f = as_matrix(feats)
    w = as_matrix(weights)
    if f.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"feats {f.shape} incompatible with weights {w.shape}")
    return np.clip(f @ w, -1.0, 1.0)


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def tangent_basis(mu) -> np.ndarray:
    """Orthonormal basis (rows) of the hyperplane orthogonal to unit ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.shape[0]
    # Householder reflection maps e_0 to mu; the remaining columns span mu's complement.
    e0 = np.zeros(d)
    e0[0] = 1.0
    v = e0 - mu
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        return np.eye(d)[1:]
    v /= nv
    H = np.eye(d) - 2.0 * np.outer(v, v)
    return H[:, 1:].T
