"""Input validation helpers and the small value types shared across the library.

Images are plain numpy arrays: float64, channel-last, shape (H, W, C) with
C in {1, 3} and every pixel in [0, 1]. Batches stack images on a leading
axis, shape (N, H, W, C). The helpers below are the single place where
those conventions are enforced; every public entry point funnels its
array arguments through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_RANGE_ATOL = 0.0
BUDGET_ATOL = 1e-9


def as_pixel_array(data, name="image"):
    """Convert to a C-contiguous float64 array without range/shape checks."""
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image(image, name="image"):
    """Validate a single image: (H, W, C) float64 in [0, 1], C in {1, 3}."""
    arr = as_pixel_array(image, name)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ValueError(f"{name} must have positive height and width, got {arr.shape}")
    if c not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {c}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} has pixels outside [0, 1]")
    return arr


def check_image_batch(batch, name="batch"):
    """Validate an image batch: nonempty (N, H, W, C), uniform shape, [0, 1]."""
    if isinstance(batch, (list, tuple)):
        if len(batch) == 0:
            raise ValueError(f"{name} must be nonempty")
        shapes = {np.shape(b) for b in batch}
        if len(shapes) != 1:
            raise ValueError(f"{name} images must share one shape, got {sorted(shapes)}")
        batch = np.stack([np.asarray(b, dtype=np.float64) for b in batch])
    arr = as_pixel_array(batch, name)
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W, C), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must be nonempty")
    check_image(arr[0], name=f"{name}[0]")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} has pixels outside [0, 1]")
    return arr


def check_same_shape(a, b, names=("first", "second")):
    if np.shape(a) != np.shape(b):
        raise ValueError(
            f"{names[0]} and {names[1]} must share a shape, "
            f"got {np.shape(a)} vs {np.shape(b)}"
        )


def freeze(arr):
    """Mark an array read-only and return it. Constructors use this so
    shared values cannot be mutated behind a consumer's back."""
    arr.flags.writeable = False
    return arr


def perturbation_norm(delta, norm_type):
    """Norm of a perturbation under the attack's geometry."""
    if norm_type == "linf":
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    if norm_type == "l2":
        return float(np.sqrt(np.sum(np.square(delta))))
    raise ValueError(f"unknown norm type {norm_type!r} (expected 'linf' or 'l2')")


def check_norm_type(norm_type):
    if norm_type not in ("linf", "l2"):
        raise ValueError(f"unknown norm type {norm_type!r} (expected 'linf' or 'l2')")
    return norm_type


@dataclass(frozen=True)
class LabeledImage:
    """An image with its ground-truth identity and a stable ordinal."""

    image: np.ndarray
    identity: int
    index: int

    def __post_init__(self):
        img = check_image(self.image)
        object.__setattr__(self, "image", freeze(img))
        if self.identity < 0:
            raise ValueError("identity label must be nonnegative")
        if self.index < 0:
            raise ValueError("index must be nonnegative")


@dataclass(frozen=True)
class IdentityMask:
    """Additive perturbation tied to the budget it was produced under.

    ``source + delta`` is the protected image; the mask respects both the
    norm budget and pixel validity of its source by construction.
    """

    delta: np.ndarray
    norm_type: str
    epsilon: float

    def __post_init__(self):
        delta = as_pixel_array(self.delta, "delta")
        object.__setattr__(self, "delta", freeze(delta))
        check_norm_type(self.norm_type)
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if perturbation_norm(delta, self.norm_type) > self.epsilon + BUDGET_ATOL:
            raise ValueError("mask exceeds its norm budget")

    @classmethod
    def from_pair(cls, protected, source, norm_type, epsilon):
        """Build a mask from a protected/source pair, checking that the
        protected image is a valid image (range check happens there)."""
        check_image(protected, "protected")
        src = check_image(source, "source")
        check_same_shape(protected, src, ("protected", "source"))
        return cls(np.asarray(protected) - src, norm_type, float(epsilon))

    def apply(self, source):
        src = check_image(source, "source")
        check_same_shape(self.delta, src, ("delta", "source"))
        out = src + self.delta
        return check_image(out, "masked image")
