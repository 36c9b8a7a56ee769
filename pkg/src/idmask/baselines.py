"""Comparison attacks sharing the masker's projection and step machinery.

* ``mim_protect``    momentum iterative update against one fixed target.
* ``dim_protect``    MIM with the gradient taken through a random
                     downscale-and-pad input diversity transform.
* ``mt_dim_protect`` DIM with the target reassigned each iteration from a
                     target set (nearest-in-feature-space by default;
                     cyclic and seeded-random schedules behind the
                     ``assignment`` flag).

All of them run the naturalness weight at zero and inherit the budget and
pixel-range guarantees from the shared loop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .embedding import squared_distances
from .geometry import bilinear_resize, bilinear_resize_adjoint
from .masking import MaskerState, _run, step
from .objective import total_loss_and_grad
from .selection import as_target_set
from .validation import check_image, check_image_batch, freeze


@dataclass(frozen=True)
class DiversityConfig:
    """Input-diversity transform settings.

    With probability ``probability`` an image is bilinearly downscaled by
    a uniform factor in [scale_min, scale_max] and zero-padded back to
    its original size at a uniform random offset; otherwise it passes
    through unchanged. All draws come from one generator seeded with
    ``seed``, so a run is reproducible end to end.
    """

    probability: float = 0.5
    scale_min: float = 0.8
    scale_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if not 0.0 < self.scale_min <= self.scale_max <= 1.0:
            raise ValueError("need 0 < scale_min <= scale_max <= 1")


def _sample_params(shape, config, rng):
    """Draw one transform decision; None means identity."""
    h, w, _ = shape
    if rng.random() >= config.probability:
        return None
    scale = rng.uniform(config.scale_min, config.scale_max)
    h2 = max(1, int(round(h * scale)))
    w2 = max(1, int(round(w * scale)))
    oy = int(rng.integers(0, h - h2 + 1))
    ox = int(rng.integers(0, w - w2 + 1))
    return h2, w2, oy, ox


def _apply_params(image, params):
    if params is None:
        return np.array(image, dtype=np.float64, copy=True)
    h, w, c = image.shape
    h2, w2, oy, ox = params
    out = np.zeros((h, w, c))
    out[oy : oy + h2, ox : ox + w2] = bilinear_resize(image, h2, w2)
    return out


def diversity_transform(image, config, rng=None):
    """Apply one seeded input-diversity draw to a single image."""
    img = check_image(image)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return _apply_params(img, _sample_params(img.shape, config, rng))


def _diversity_hook(config, rng):
    """Batch transform + exact vjp for the shared optimizer loop."""

    def transform(batch):
        params = [_sample_params(batch.shape[1:], config, rng) for _ in batch]
        transformed = np.stack(
            [_apply_params(batch[i], p) for i, p in enumerate(params)]
        )

        def vjp(grads):
            pulled = np.empty_like(grads)
            h, w, _ = batch.shape[1:]
            for i, p in enumerate(params):
                if p is None:
                    pulled[i] = grads[i]
                else:
                    h2, w2, oy, ox = p
                    crop = grads[i, oy : oy + h2, ox : ox + w2]
                    pulled[i] = bilinear_resize_adjoint(crop, h, w)
            return pulled

        return transformed, vjp

    return transform


def _single_target_set(target):
    return as_target_set(np.asarray(target, dtype=np.float64)[None])


def mim_protect(reference, target, model, config):
    """Momentum iterative attack on one target; definitionally equal to
    protect_batch with fixed selection and the naturalness weight off."""
    refs = check_image_batch(reference, "reference batch")
    cfg = dc_replace(config, selection="fixed", target_index=0, gamma=0.0)
    state = _run(refs, _single_target_set(target), model, cfg)
    return freeze(state.batch)


def dim_protect(reference, target, model, config, diversity):
    """MIM with gradients taken through the input-diversity transform."""
    refs = check_image_batch(reference, "reference batch")
    cfg = dc_replace(config, selection="fixed", target_index=0, gamma=0.0)
    rng = np.random.default_rng(diversity.seed)
    state = _run(
        refs,
        _single_target_set(target),
        model,
        cfg,
        input_transform=_diversity_hook(diversity, rng),
    )
    return freeze(state.batch)


def mt_dim_protect(reference, targets, model, config, diversity, assignment="nearest"):
    """Multi-target DIM: the target is reassigned from the target set at
    every iteration.

    Assignment schedules: "nearest" (default) gives each item the target
    currently closest in feature space, "cycle" walks the set in order,
    and "random" draws a seeded schedule. Nearest assignment keeps the
    per-iteration directions coherent, which is what lets the multi-target
    variant improve on single-target DIM.
    """
    refs = check_image_batch(reference, "reference batch")
    target_set = as_target_set(targets)
    if len(target_set) == 0:
        raise ValueError("target set must be nonempty")
    if assignment == "cycle":
        cfg = dc_replace(config, selection="cycle", gamma=0.0)
        rng = np.random.default_rng(diversity.seed)
        state = _run(
            refs, target_set, model, cfg, input_transform=_diversity_hook(diversity, rng)
        )
        return freeze(state.batch)
    if assignment == "random":
        schedule = np.random.default_rng(diversity.seed + 1).integers(
            0, len(target_set), size=config.iterations
        )

        def pick(t, state):
            return np.full(refs.shape[0], schedule[t], dtype=np.intp)

    elif assignment == "nearest":

        def pick(t, state):
            feats = model.transform(state.batch)
            return np.argmin(
                squared_distances(feats, target_set.features(model)), axis=1
            )

    else:
        raise ValueError(f"unknown assignment {assignment!r}")

    cfg = dc_replace(config, gamma=0.0)
    rng = np.random.default_rng(diversity.seed)
    hook = _diversity_hook(diversity, rng)
    state = MaskerState(batch=refs.copy(), reference=refs, momentum=np.zeros_like(refs))
    for t in range(cfg.iterations):
        idx = np.asarray(pick(t, state), dtype=np.intp)
        state.selected.append(idx)
        transformed, vjp = hook(state.batch)
        _, inner = total_loss_and_grad(
            model, transformed, target_set.images[idx], refs, 0.0, None
        )
        state = step(state, vjp(inner), cfg)
    return freeze(state.batch)
