"""The optimization objective: identification loss, MMD penalty, and their
exact pixel-space gradients.

The identification term rewards moving a protected image's embedding
toward a chosen target and away from its own original:

    L_iden(t, p) = D_f(p, t) - D_f(p, r)

The naturalness term is the biased (V-statistic) empirical MMD between
the protected batch and the real batch under a mixture-of-Gaussians
kernel on raw pixels:

    MMD(Xp, Xr) = (1/N^2) [ sum k(pi, pj) - 2 sum k(pi, rj) + sum k(ri, rj) ]
    k(a, b)     = mean_m exp(-|a - b|^2 / (2 s_m))

where s_m are squared-distance bandwidths. The batch objective averages
the identification losses and adds gamma * MMD.
"""

from __future__ import annotations

import numpy as np

from .validation import as_pixel_array


def check_bandwidths(bandwidths):
    """Validate a Gaussian-mixture bandwidth list (squared-distance scale)."""
    bw = np.atleast_1d(np.asarray(bandwidths, dtype=np.float64))
    if bw.size == 0:
        raise ValueError("at least one kernel bandwidth is required")
    if not np.all(np.isfinite(bw)) or np.any(bw <= 0):
        raise ValueError("kernel bandwidths must be finite and positive")
    return bw


BANDWIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


def matched_bandwidths(base_sq_scale, factors=BANDWIDTH_FACTORS):
    """Bandwidth mixture spread around a base squared-distance scale."""
    base = float(base_sq_scale)
    if not np.isfinite(base) or base <= 0:
        base = 1.0
    return check_bandwidths([base * f for f in factors])


def median_heuristic_bandwidths(batch, factors=BANDWIDTH_FACTORS):
    """Classic median heuristic: base scale is the median pairwise squared
    pixel distance of the batch (fallback 1.0 when under two images)."""
    arr = as_pixel_array(batch, "batch")
    flat = arr.reshape(arr.shape[0], -1)
    n = flat.shape[0]
    if n < 2:
        return matched_bandwidths(1.0, factors)
    d2 = _pairwise_sq_dists(flat, flat)
    med = float(np.median(d2[np.triu_indices(n, k=1)]))
    return matched_bandwidths(med, factors)


def perturbation_scale_bandwidths(epsilon, image_shape, factors=BANDWIDTH_FACTORS):
    """Bandwidths matched to the reachable perturbation magnitude.

    A full-budget Linf perturbation of an image with n pixels has squared
    L2 size epsilon^2 * n; centering the kernel mixture there keeps the
    naturalness term responsive at the scale the optimizer actually moves,
    where inter-image distances would flatten it to noise.
    """
    n = int(np.prod(image_shape))
    base = max(float(epsilon), 1e-3) ** 2 * n
    return matched_bandwidths(base, factors)


def _pairwise_sq_dists(flat_a, flat_b):
    diff = flat_a[:, None, :] - flat_b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kernel_and_weight(d2, bandwidths):
    """Mixture kernel values and the matching gradient weights.

    Returns (k, w) with k = mean_m exp(-d2 / 2 s_m) and
    w = mean_m exp(-d2 / 2 s_m) / s_m, so that grad_a k(a,b) = -w (a - b).
    """
    k = np.zeros_like(d2)
    w = np.zeros_like(d2)
    for s in bandwidths:
        e = np.exp(-d2 / (2.0 * s))
        k += e
        w += e / s
    m = float(len(bandwidths))
    return k / m, w / m


def mmd(batch_p, batch_r, bandwidths):
    """Biased empirical MMD between two equal-size batches, clamped at 0."""
    xp = as_pixel_array(batch_p, "protected batch")
    xr = as_pixel_array(batch_r, "real batch")
    if xp.shape != xr.shape or xp.ndim != 4 or xp.shape[0] == 0:
        raise ValueError(
            f"batches must be nonempty and share a shape, got {xp.shape} vs {xr.shape}"
        )
    bw = check_bandwidths(bandwidths)
    fp = xp.reshape(xp.shape[0], -1)
    fr = xr.reshape(xr.shape[0], -1)
    n = fp.shape[0]
    kpp, _ = _kernel_and_weight(_pairwise_sq_dists(fp, fp), bw)
    kpr, _ = _kernel_and_weight(_pairwise_sq_dists(fp, fr), bw)
    krr, _ = _kernel_and_weight(_pairwise_sq_dists(fr, fr), bw)
    value = (kpp.sum() - 2.0 * kpr.sum() + krr.sum()) / (n * n)
    return max(0.0, float(value))


def mmd_grad(batch_p, batch_r, bandwidths):
    """Exact gradient of :func:`mmd` with respect to the protected batch."""
    xp = as_pixel_array(batch_p, "protected batch")
    xr = as_pixel_array(batch_r, "real batch")
    if xp.shape != xr.shape or xp.ndim != 4 or xp.shape[0] == 0:
        raise ValueError(
            f"batches must be nonempty and share a shape, got {xp.shape} vs {xr.shape}"
        )
    bw = check_bandwidths(bandwidths)
    fp = xp.reshape(xp.shape[0], -1)
    fr = xr.reshape(xr.shape[0], -1)
    n = fp.shape[0]
    _, wpp = _kernel_and_weight(_pairwise_sq_dists(fp, fp), bw)
    _, wpr = _kernel_and_weight(_pairwise_sq_dists(fp, fr), bw)
    # d/dpi of the pp block counts row i and column i, and k is symmetric:
    #   grad_i = (2/N^2) [ -sum_j wpp[i,j] (pi - pj) + sum_j wpr[i,j] (pi - rj) ]
    row_pp = wpp.sum(axis=1)
    row_pr = wpr.sum(axis=1)
    grad = (
        -(row_pp[:, None] * fp - wpp @ fp) + (row_pr[:, None] * fp - wpr @ fr)
    ) * (2.0 / (n * n))
    return grad.reshape(xp.shape)


def identification_loss(model, image_p, image_t, image_r):
    """D_f(p, t) - D_f(p, r); negative once p sits nearer the target."""
    fp = model.embed(image_p)
    ft = model.embed(image_t)
    fr = model.embed(image_r)
    dt = fp - ft
    dr = fp - fr
    return float(np.dot(dt, dt) - np.dot(dr, dr))


def identification_loss_grad(model, image_p, image_t, image_r):
    """Exact gradient of the identification loss in the pixels of p.

    Two vector-Jacobian products with cotangents 2(f(p)-f(t)) and
    -2(f(p)-f(r)); they cancel exactly when t equals r.
    """
    fp = model.embed(image_p)
    ft = model.embed(image_t)
    fr = model.embed(image_r)
    toward = model.input_gradient(image_p, 2.0 * (fp - ft))
    away = model.input_gradient(image_p, -2.0 * (fp - fr))
    return toward + away


def batch_identification_loss_and_grad(model, batch_p, batch_t, batch_r):
    """Per-item identification losses and gradients, vectorized.

    Returns (losses (N,), grads (N, H, W, C)).
    """
    fp = model.transform(batch_p)
    ft = model.transform(batch_t)
    fr = model.transform(batch_r)
    dt = fp - ft
    dr = fp - fr
    losses = np.einsum("ij,ij->i", dt, dt) - np.einsum("ij,ij->i", dr, dr)
    toward = model.input_gradient_batch(batch_p, 2.0 * dt)
    away = model.input_gradient_batch(batch_p, -2.0 * dr)
    return losses, toward + away


def total_loss_and_grad(model, batch_p, targets, batch_r, gamma, bandwidths=None):
    """Batch objective mean(L_iden) + gamma * MMD and its full gradient.

    ``targets`` is one target image per batch item (items may share a
    target). ``bandwidths`` is required when gamma is nonzero.
    """
    xp = as_pixel_array(batch_p, "protected batch")
    xt = as_pixel_array(targets, "target batch")
    xr = as_pixel_array(batch_r, "real batch")
    if not (xp.shape == xt.shape == xr.shape) or xp.ndim != 4:
        raise ValueError(
            "protected, target and real batches must share one (N, H, W, C) shape"
        )
    n = xp.shape[0]
    losses, grads = batch_identification_loss_and_grad(model, xp, xt, xr)
    value = float(np.mean(losses))
    grads = grads / n
    if gamma != 0.0:
        if bandwidths is None:
            raise ValueError("bandwidths are required when gamma is nonzero")
        value += gamma * mmd(xp, xr, bandwidths)
        grads = grads + gamma * mmd_grad(xp, xr, bandwidths)
    return value, grads
