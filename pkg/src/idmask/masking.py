"""The identity-mask optimizer.

An iterative projected update with momentum drives a batch of protected
images toward per-iteration selected targets while a norm-ball projection
and the pixel clamp keep every iterate a valid masked image:

    g_{t+1} = mu * g_t + grad / |grad|_1          (per item)
    X_{t+1} = project(X_t - alpha * normalize(g_{t+1}))

Target choice per iteration is pluggable: greedy gain maximization,
center (sum-form) gain, a fixed target, or cyclic assignment. The
estimator wrapper :class:`TipImMasker` exposes the optimizer in
fit/transform form: ``fit`` ingests the substitute target set and
``transform`` protects a batch of images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import homography_from_points, warp_image
from .objective import perturbation_scale_bandwidths, total_loss_and_grad
from .projection import (
    normalize_direction,
    normalize_direction_batch,
    project,
    project_batch,
)

__all__ = [
    "AttackConfig",
    "MaskerState",
    "TipImMasker",
    "augment_to_batch",
    "normalize_direction",
    "normalize_direction_batch",
    "project",
    "project_batch",
    "protect_batch",
    "protect_single",
    "step",
]
from .selection import as_target_set, select_targets_batch
from .validation import (
    BUDGET_ATOL,
    IdentityMask,
    check_image,
    check_image_batch,
    check_norm_type,
    freeze,
    perturbation_norm,
)

SELECTION_MODES = ("greedy", "center", "fixed", "cycle")


@dataclass(frozen=True)
class AttackConfig:
    """Optimizer settings, all perturbation scales in unit pixel range."""

    norm_type: str = "linf"
    epsilon: float = 12.0 / 255.0
    alpha: float = 1.5 / 255.0
    iterations: int = 50
    momentum: float = 1.0
    gamma: float = 0.0
    selection: str = "greedy"
    target_index: int = 0
    bandwidths: tuple | None = None

    def __post_init__(self):
        check_norm_type(self.norm_type)
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.alpha > self.epsilon:
            raise ValueError("alpha must not exceed epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.momentum < 0:
            raise ValueError("momentum must be nonnegative")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError("gamma must be finite and nonnegative")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")
        if self.target_index < 0:
            raise ValueError("target_index must be nonnegative")


@dataclass
class MaskerState:
    """Optimizer state after ``iteration`` committed updates."""

    batch: np.ndarray
    reference: np.ndarray
    momentum: np.ndarray
    iteration: int = 0
    selected: list = field(default_factory=list)

    def audit(self, config):
        """Raise unless every item satisfies the budget and pixel range."""
        for i in range(self.batch.shape[0]):
            delta = self.batch[i] - self.reference[i]
            norm = perturbation_norm(delta, config.norm_type)
            if norm > config.epsilon + BUDGET_ATOL:
                raise AssertionError(
                    f"item {i}: |delta|_{config.norm_type} = {norm} exceeds budget"
                )
        if self.batch.min() < 0.0 or self.batch.max() > 1.0:
            raise AssertionError("pixels left [0, 1]")


def step(state, grads, config):
    """One committed update: momentum accumulation, normalized descent step,
    projection back onto the budget. Returns a new state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.batch.shape:
        raise ValueError(f"gradient shape {grads.shape} != batch {state.batch.shape}")
    if not np.all(np.isfinite(grads)):
        raise ValueError("gradient contains non-finite values")
    flat = np.abs(grads).reshape(grads.shape[0], -1)
    l1 = flat.sum(axis=1)
    safe = np.where(l1 == 0.0, 1.0, l1)
    normalized = grads / safe.reshape((-1,) + (1,) * (grads.ndim - 1))
    momentum = config.momentum * state.momentum + normalized
    direction = normalize_direction_batch(momentum, config.norm_type)
    moved = state.batch - config.alpha * direction
    batch = project_batch(moved, state.reference, config.norm_type, config.epsilon)
    return MaskerState(
        batch=batch,
        reference=state.reference,
        momentum=momentum,
        iteration=state.iteration + 1,
        selected=state.selected,
    )


def _resolve_bandwidths(config, image_shape):
    if config.gamma == 0.0:
        return None
    if config.bandwidths is not None:
        return np.asarray(config.bandwidths, dtype=np.float64)
    return perturbation_scale_bandwidths(config.epsilon, image_shape)


def _pick_indices(t, state, target_set, model, config):
    n = state.batch.shape[0]
    k = len(target_set)
    if config.selection == "fixed":
        if config.target_index >= k:
            raise ValueError(f"target_index {config.target_index} out of range 0..{k-1}")
        return np.full(n, config.target_index, dtype=np.intp)
    if config.selection == "cycle":
        return np.full(n, t % k, dtype=np.intp)
    kind = "max" if config.selection == "greedy" else "sum"
    idx, _ = select_targets_batch(
        model,
        state.batch,
        state.reference,
        target_set,
        alpha=config.alpha,
        norm_type=config.norm_type,
        epsilon=config.epsilon,
        kind=kind,
    )
    return idx


def _run(reference, target_set, model, config, *, callback=None, input_transform=None):
    """Shared iteration loop. ``input_transform``, when given, maps the
    current batch to (transformed batch, vjp) and the identification
    gradient is pulled back through it (used by input-diversity attacks)."""
    bandwidths = _resolve_bandwidths(config, reference.shape[1:])
    state = MaskerState(
        batch=reference.copy(),
        reference=reference,
        momentum=np.zeros_like(reference),
    )
    for t in range(config.iterations):
        indices = _pick_indices(t, state, target_set, model, config)
        state.selected.append(indices)
        chosen = target_set.images[indices]
        if input_transform is None:
            _, grads = total_loss_and_grad(
                model, state.batch, chosen, reference, config.gamma, bandwidths
            )
        else:
            transformed, vjp = input_transform(state.batch)
            _, inner = total_loss_and_grad(
                model, transformed, chosen, reference, config.gamma, bandwidths
            )
            grads = vjp(inner)
        state = step(state, grads, config)
        if callback is not None:
            callback(state)
    return state


def protect_batch(reference, targets, model, config, *, callback=None):
    """Run the full optimizer over a batch of originals.

    Returns (protected batch, list of IdentityMask). ``callback``, when
    given, is invoked with the state after every committed iteration.
    """
    refs = check_image_batch(reference, "reference batch")
    target_set = as_target_set(targets)
    if len(target_set) == 0:
        raise ValueError("target set must be nonempty")
    if target_set.images.shape[1:] != refs.shape[1:]:
        raise ValueError(
            f"target shape {target_set.images.shape[1:]} != image shape {refs.shape[1:]}"
        )
    state = _run(refs, target_set, model, config, callback=callback)
    protected = freeze(state.batch)
    masks = [
        IdentityMask.from_pair(protected[i], refs[i], config.norm_type, config.epsilon)
        for i in range(protected.shape[0])
    ]
    return protected, masks


def augment_to_batch(image, count, seed):
    """Expand one image into a batch: the original plus seeded small
    rotations (within 10 degrees, bilinear, edge-replicate), brightness
    scales in [0.8, 1.2] and mild projective corner jitter."""
    img = check_image(image)
    if count < 1:
        raise ValueError("count must be at least 1")
    h, w, _ = img.shape
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]
    )
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rng = np.random.default_rng(seed)
    out = [img]
    for _ in range(count - 1):
        angle = rng.uniform(-np.pi / 18.0, np.pi / 18.0)
        jitter = rng.uniform(-0.04, 0.04, size=(4, 2)) * min(h, w)
        brightness = rng.uniform(0.8, 1.2)
        c, s = np.cos(angle), np.sin(angle)
        rel = corners - (cx, cy)
        rotated = np.column_stack(
            [c * rel[:, 0] + s * rel[:, 1] + cx, -s * rel[:, 0] + c * rel[:, 1] + cy]
        )
        warp = homography_from_points(corners, rotated + jitter)
        sample = np.clip(warp_image(img, warp) * brightness, 0.0, 1.0)
        out.append(sample)
    return freeze(np.stack(out))


def protect_single(image, targets, model, config, *, batch_size=50, seed=0):
    """Protect a lone image by first self-augmenting it into a batch so the
    naturalness term has a population to match; item 0 is the original."""
    batch = augment_to_batch(image, batch_size, seed)
    protected, masks = protect_batch(batch, targets, model, config)
    return protected[0], masks[0]


class TipImMasker(BaseEstimator, TransformerMixin):
    """Estimator facade over :func:`protect_batch`.

    ``fit(X)`` ingests the substitute target images; ``transform(X)``
    protects a batch of originals against ``model`` and records the
    per-iteration selection trace and the masks on the instance.
    """

    def __init__(
        self,
        model=None,
        norm_type="linf",
        epsilon=12.0 / 255.0,
        alpha=1.5 / 255.0,
        iterations=50,
        momentum=1.0,
        gamma=0.0,
        selection="greedy",
        target_index=0,
        bandwidths=None,
    ):
        self.model = model
        self.norm_type = norm_type
        self.epsilon = epsilon
        self.alpha = alpha
        self.iterations = iterations
        self.momentum = momentum
        self.gamma = gamma
        self.selection = selection
        self.target_index = target_index
        self.bandwidths = bandwidths

    def _config(self):
        return AttackConfig(
            norm_type=self.norm_type,
            epsilon=self.epsilon,
            alpha=self.alpha,
            iterations=self.iterations,
            momentum=self.momentum,
            gamma=self.gamma,
            selection=self.selection,
            target_index=self.target_index,
            bandwidths=self.bandwidths,
        )

    def fit(self, X, y=None):
        self._config()
        if self.model is None:
            raise ValueError("TipImMasker requires an embedding model")
        self.targets_ = as_target_set(X)
        return self

    def transform(self, X):
        if not hasattr(self, "targets_"):
            raise ValueError("TipImMasker is not fitted: call fit(target_images) first")
        traces = []
        protected, masks = protect_batch(
            X,
            self.targets_,
            self.model,
            self._config(),
            callback=lambda state: traces.append(state.selected[-1]),
        )
        self.masks_ = masks
        self.selection_trace_ = traces
        return protected
