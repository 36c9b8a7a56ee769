"""Norm-ball projection and gradient normalization primitives.

Both operate in the unit pixel scale. ``project`` composes the epsilon
ball clip with the [0, 1] pixel clamp; the pixel clamp can only shrink a
perturbation component-wise (the reference itself is a valid image), so
the composition keeps both constraints satisfied at exit and is
idempotent. A relative slack of 1e-12 on the L2 trigger keeps repeated
projection bitwise stable against rounding in the rescale.
"""

from __future__ import annotations

import numpy as np

from .validation import check_norm_type

_L2_SLACK = 1e-12


def project(x, reference, norm_type, epsilon):
    """Project ``x`` onto the epsilon ball around ``reference``, then [0, 1].

    Linf clips the perturbation per pixel; L2 rescales it radially
    (direction preserved). Inputs already satisfying both constraints are
    returned unchanged.
    """
    check_norm_type(norm_type)
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    delta = x - ref
    if norm_type == "linf":
        in_ball = bool(np.all(np.abs(delta) <= epsilon))
        clipped = delta if in_ball else np.clip(delta, -epsilon, epsilon)
    else:
        norm = float(np.sqrt(np.sum(delta * delta)))
        in_ball = norm <= epsilon * (1.0 + _L2_SLACK)
        clipped = delta if in_ball else delta * (epsilon / norm)
    if in_ball and bool(np.all((x >= 0.0) & (x <= 1.0))):
        return x
    return np.clip(ref + clipped, 0.0, 1.0)


def project_batch(batch, reference, norm_type, epsilon):
    """Per-item :func:`project` over matching (N, H, W, C) batches."""
    check_norm_type(norm_type)
    batch = np.asarray(batch, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if batch.shape != ref.shape:
        raise ValueError(f"shape mismatch: {batch.shape} vs {ref.shape}")
    return np.stack(
        [project(batch[i], ref[i], norm_type, epsilon) for i in range(batch.shape[0])]
    )


def normalize_direction(gradient, norm_type):
    """Turn a raw gradient into a unit step direction.

    Linf uses the elementwise sign (sign(0) = 0); L2 divides by the
    global L2 norm. An all-zero gradient stays all-zero.
    """
    check_norm_type(norm_type)
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite values")
    if norm_type == "linf":
        return np.sign(g)
    norm = float(np.sqrt(np.sum(g * g)))
    if norm == 0.0:
        return np.zeros_like(g)
    return g / norm


def normalize_direction_batch(gradients, norm_type):
    """Per-item :func:`normalize_direction` over an (N, ...) gradient stack."""
    check_norm_type(norm_type)
    g = np.asarray(gradients, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite values")
    if norm_type == "linf":
        return np.sign(g)
    flat = g.reshape(g.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    safe = np.where(norms == 0.0, 1.0, norms)
    return g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
