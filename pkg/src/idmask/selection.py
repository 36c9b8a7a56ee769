"""Greedy-insertion target selection.

At every optimizer iteration each protected image probes a one-step
candidate update toward every target in the substitute set, scores the
candidates with a feature-similarity gain, and commits to the target
with the largest gain (ties broken by lowest index). Two gain flavors:

* ``gain``        log(1 + max_t exp(D_f(p, r) - D_f(p, t)))
* ``center_gain`` log(1 + sum_t exp(D_f(p, r) - D_f(p, t)))

Both are strictly positive by construction; the sum dominates the max.
The candidate probe uses the plain identification-loss gradient, without
momentum and without the naturalness term.
"""

from __future__ import annotations

import weakref

import numpy as np

from .embedding import squared_distances
from .objective import batch_identification_loss_and_grad
from .projection import normalize_direction_batch, project_batch
from .validation import check_image_batch, freeze


class TargetSet:
    """Ordered substitute target images with per-model feature caching."""

    def __init__(self, images):
        self.images = freeze(check_image_batch(images, "target set"))
        # weak keys so a replaced model cannot alias a stale cache entry
        self._cache = weakref.WeakKeyDictionary()

    def __len__(self):
        return self.images.shape[0]

    def features(self, model):
        if model not in self._cache:
            self._cache[model] = model.transform(self.images)
        return self._cache[model]

    def subset(self, count):
        """The first ``count`` targets as a fresh TargetSet."""
        if not 1 <= count <= len(self):
            raise ValueError(f"subset size {count} out of range 1..{len(self)}")
        return TargetSet(self.images[:count])


def as_target_set(targets):
    if isinstance(targets, TargetSet):
        return targets
    return TargetSet(targets)


def _log1p_exp(m):
    # log(1 + exp(m)) without overflow
    return np.logaddexp(0.0, m)


def _margins(feat_p, feat_r, feat_targets):
    d_r = np.einsum("ij,ij->i", feat_p - feat_r, feat_p - feat_r)
    d_t = squared_distances(feat_p, feat_targets)
    return d_r[:, None] - d_t


def gain(model, image_p, image_r, targets):
    """Feature-similarity gain of a candidate protected image (max form)."""
    targets = as_target_set(targets)
    margins = _margins(
        model.embed(image_p)[None], model.embed(image_r)[None], targets.features(model)
    )
    return float(_log1p_exp(margins.max(axis=1))[0])


def center_gain(model, image_p, image_r, targets):
    """Sum-form gain; pulls candidates toward the target-set feature center."""
    targets = as_target_set(targets)
    margins = _margins(
        model.embed(image_p)[None], model.embed(image_r)[None], targets.features(model)
    )
    return float(_log1p_exp(_logsumexp_rows(margins))[0])


def _logsumexp_rows(m):
    peak = m.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(m - peak).sum(axis=1, keepdims=True)))[:, 0]


def _batch_gains(feat_candidates, feat_r, feat_targets, kind):
    margins = _margins(feat_candidates, feat_r, feat_targets)
    if kind == "max":
        return _log1p_exp(margins.max(axis=1))
    if kind == "sum":
        return _log1p_exp(_logsumexp_rows(margins))
    raise ValueError(f"unknown gain kind {kind!r}")


def select_targets_batch(
    model, batch_p, batch_r, targets, *, alpha, norm_type, epsilon, kind="max"
):
    """Greedy target choice for every item of a batch.

    For each target: take one candidate identification-loss step, score
    the stepped image with the gain, and keep the argmax per item.
    Returns (indices (N,), gains (N,)).
    """
    targets = as_target_set(targets)
    xp = np.asarray(batch_p, dtype=np.float64)
    xr = np.asarray(batch_r, dtype=np.float64)
    feat_r = model.transform(xr)
    feat_targets = targets.features(model)
    n = xp.shape[0]
    scores = np.empty((n, len(targets)))
    for k in range(len(targets)):
        batch_t = np.broadcast_to(targets.images[k], xp.shape)
        _, grads = batch_identification_loss_and_grad(model, xp, batch_t, xr)
        step = xp - alpha * normalize_direction_batch(grads, norm_type)
        candidates = project_batch(step, xr, norm_type, epsilon)
        scores[:, k] = _batch_gains(
            model.transform(candidates), feat_r, feat_targets, kind
        )
    best = np.argmax(scores, axis=1)
    return best, scores[np.arange(n), best]


def select_target(model, image_p, image_r, targets, *, alpha, norm_type, epsilon):
    """Single-image greedy selection; returns (best index, best gain)."""
    targets = as_target_set(targets)
    if len(targets) == 0:
        raise ValueError("target set must be nonempty")
    idx, best = select_targets_batch(
        model,
        np.asarray(image_p)[None],
        np.asarray(image_r)[None],
        targets,
        alpha=alpha,
        norm_type=norm_type,
        epsilon=epsilon,
    )
    return int(idx[0]), float(best[0])
