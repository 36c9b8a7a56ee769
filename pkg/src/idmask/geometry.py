"""Differentiable-enough image geometry: homography warps and bilinear resize.

The resize here is separable bilinear with the half-pixel center
convention, exposed together with its exact adjoint so gradients can be
pulled back through the input-diversity transform. Warps use inverse
mapping with edge-replicated sampling.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def homography_from_points(src, dst):
    """Solve the 3x3 homography H with H(src_i) ~ dst_i for four points.

    Points are (x, y) pairs. Standard DLT with the scale fixed at H[2,2]=1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("homography_from_points expects four (x, y) pairs")
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y])
        rhs.append(v)
    params = np.linalg.solve(np.asarray(rows), np.asarray(rhs))
    return np.append(params, 1.0).reshape(3, 3)


def warp_image(image, h_out_to_in):
    """Warp with an output-to-input homography, bilinear, edge-replicate."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    m = h_out_to_in
    denom = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    xin = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / denom
    yin = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / denom
    xin = np.clip(xin, 0.0, w - 1.0)
    yin = np.clip(yin, 0.0, h - 1.0)
    x0 = np.floor(xin).astype(np.intp)
    y0 = np.floor(yin).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xin - x0)[..., None]
    fy = (yin - y0)[..., None]
    return (
        img[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + img[y0, x1] * fx * (1.0 - fy)
        + img[y1, x0] * (1.0 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def rotation_about_center(angle, h, w):
    """Output-to-input homography for a rotation by ``angle`` radians."""
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    c, s = np.cos(angle), np.sin(angle)
    # inverse rotation applied to output coordinates
    return np.array(
        [
            [c, s, cx - c * cx - s * cy],
            [-s, c, cy + s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ]
    )


@lru_cache(maxsize=64)
def _resize_weights(n_in, n_out):
    """(n_out, n_in) bilinear interpolation matrix, half-pixel convention."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for d in range(n_out):
        s = (d + 0.5) * scale - 0.5
        s = min(max(s, 0.0), n_in - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, n_in - 1)
        frac = s - lo
        a[d, lo] += 1.0 - frac
        a[d, hi] += frac
    return a


def bilinear_resize(image, h_out, w_out):
    """Separable bilinear resize of an (H, W, C) image."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    ar = _resize_weights(h, h_out)
    ac = _resize_weights(w, w_out)
    return np.einsum("ij,jkc,lk->ilc", ar, img, ac)


def bilinear_resize_adjoint(grad_out, h_in, w_in):
    """Exact adjoint of bilinear_resize, mapping output-shaped gradients
    back to an (h_in, w_in, C) gradient."""
    g = np.asarray(grad_out, dtype=np.float64)
    h_out, w_out, _ = g.shape
    ar = _resize_weights(h_in, h_out)
    ac = _resize_weights(w_in, w_out)
    return np.einsum("ij,ikc,kl->jlc", ar, g, ac)
