"""
Dense vector primitives and the two normalization layers.

Each layer has a forward pass returning ``(out, ctx)`` and a backward pass
that maps an output cotangent back to the input.  The ``*_rows`` variants
apply the same maps independently to every row of a 2-D array and are what
the trainer uses; the single-vector functions are the reference versions.

Everything is computed in float64 regardless of input dtype.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContextMismatch, DimensionTooSmall, NotNormalized, ZeroVector

ZERO_NORM = 1e-30
DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class NormContext:
    """Forward-pass state needed by the matching backward pass."""

    input_norm: Optional[float] = None
    mean: Optional[float] = None
    variance: Optional[float] = None
    epsilon: float = DEFAULT_EPSILON


def as_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def l2_normalize(v):
    """Return ``(v / ||v||, ctx)``.

    Raises ZeroVector when the norm is at or below 1e-30.
    """
    v = as_vector(v)
    norm = float(np.sqrt(np.dot(v, v)))
    if not norm > ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm, NormContext(input_norm=norm)


def _check_norm_ctx(norm, ctx):
    if ctx.input_norm is None or abs(norm - ctx.input_norm) > 1e-9 * max(norm, ctx.input_norm):
        raise ContextMismatch(
            f"context norm {ctx.input_norm!r} does not match input norm {norm!r}"
        )


def l2_normalize_backward(v, grad_out, ctx):
    """Vector-Jacobian product of :func:`l2_normalize`.

    Computes ``(g - (u.g) u) / ||v||`` with ``u = v / ||v||``.
    """
    v = as_vector(v)
    g = as_vector(grad_out)
    norm = float(np.sqrt(np.dot(v, v)))
    _check_norm_ctx(norm, ctx)
    u = v / ctx.input_norm
    return (g - np.dot(u, g) * u) / ctx.input_norm


def layer_norm(v, epsilon=DEFAULT_EPSILON):
    """Standardize ``v`` over its own entries; no affine parameters.

    Uses the population variance (divide by D).
    """
    v = as_vector(v)
    if v.shape[0] < 2:
        raise DimensionTooSmall("layer norm needs at least 2 entries")
    mean = float(v.mean())
    centered = v - mean
    var = float(np.dot(centered, centered) / v.shape[0])
    denom = np.sqrt(var + epsilon)
    if denom == 0.0:
        # constant input with epsilon=0
        return np.zeros_like(v), NormContext(mean=mean, variance=var, epsilon=epsilon)
    return centered / denom, NormContext(mean=mean, variance=var, epsilon=epsilon)


def layer_norm_backward(v, grad_out, ctx):
    v = as_vector(v)
    g = as_vector(grad_out)
    if ctx.mean is None or ctx.variance is None:
        raise ContextMismatch("context was not produced by layer_norm")
    mean = v.mean()
    var = np.dot(v - mean, v - mean) / v.shape[0]
    scale = max(abs(mean), np.sqrt(var), 1.0)
    if abs(mean - ctx.mean) > 1e-9 * scale or abs(var - ctx.variance) > 1e-9 * max(var, 1.0):
        raise ContextMismatch("context mean/variance do not match input")
    denom = np.sqrt(ctx.variance + ctx.epsilon)
    if denom == 0.0:
        return np.zeros_like(v)
    y = (v - ctx.mean) / denom
    return (g - g.mean() - y * np.dot(g, y) / v.shape[0]) / denom


def cosine_distance(a, b, tol=1e-6):
    """``1 - a.b`` for unit vectors ``a`` and ``b``."""
    a = as_vector(a)
    b = as_vector(b)
    for name, x in (("a", a), ("b", b)):
        n = np.sqrt(np.dot(x, x))
        if abs(n - 1.0) > tol:
            raise NotNormalized(f"{name} has norm {n!r}")
    return float(1.0 - np.dot(a, b))


# -- row-wise versions -------------------------------------------------------

def l2_normalize_rows(X):
    """Normalize every row; returns ``(U, norms)``."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(~(norms > ZERO_NORM)):
        bad = int(np.flatnonzero(~(norms > ZERO_NORM))[0])
        raise ZeroVector(f"row {bad} has norm {norms[bad]!r}")
    return X / norms[:, None], norms


def l2_normalize_rows_backward(U, norms, G):
    """Row-wise VJP of :func:`l2_normalize_rows` given its outputs."""
    G = np.asarray(G, dtype=np.float64)
    radial = np.einsum("ij,ij->i", U, G)
    return (G - radial[:, None] * U) / norms[:, None]


def layer_norm_rows(X, epsilon=DEFAULT_EPSILON):
    """Row-wise layer norm; returns ``(Y, denom)`` with ``denom = sqrt(var + eps)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] < 2:
        raise DimensionTooSmall("layer norm needs at least 2 entries")
    centered = X - X.mean(axis=1, keepdims=True)
    var = np.einsum("ij,ij->i", centered, centered) / X.shape[1]
    denom = np.sqrt(var + epsilon)
    safe = np.where(denom == 0.0, 1.0, denom)
    return centered / safe[:, None], denom


def layer_norm_rows_backward(Y, denom, G):
    G = np.asarray(G, dtype=np.float64)
    d = Y.shape[1]
    proj = np.einsum("ij,ij->i", G, Y) / d
    out = G - G.mean(axis=1, keepdims=True) - Y * proj[:, None]
    safe = np.where(denom == 0.0, np.inf, denom)
    return out / safe[:, None]
