import numpy as np
import pytest

from idmask.protocol import synthesize_identities
from idmask.embedding import MlpEmbedder


class IdentityEmbedder:
    """Minimal duck-typed model: feature = flattened pixels, no normalization.

    Lets hand-derived gradient examples stay in closed form.
    """

    def __init__(self, shape):
        self.input_shape_ = shape
        self.output_dim_ = int(np.prod(shape))

    def embed(self, image):
        return np.asarray(image, dtype=np.float64).reshape(-1)

    def transform(self, batch):
        arr = np.asarray(batch, dtype=np.float64)
        return arr.reshape(arr.shape[0], -1)

    def input_gradient(self, image, cotangent):
        return np.asarray(cotangent, dtype=np.float64).reshape(self.input_shape_)

    def input_gradient_batch(self, batch, cotangents, through_normalization=True):
        arr = np.asarray(cotangents, dtype=np.float64)
        return arr.reshape((len(arr),) + self.input_shape_)


def central_difference(fn, x, index, h=1e-5):
    """Two-sided finite difference of a scalar function at one coordinate."""
    plus = np.array(x, dtype=np.float64)
    minus = np.array(x, dtype=np.float64)
    plus[index] += h
    minus[index] -= h
    return (fn(plus) - fn(minus)) / (2.0 * h)


def gradcheck(fn, grad, x, rng, n_coords=10, h=1e-5, rtol=1e-6):
    """Compare an analytic gradient array against central differences at
    randomly drawn coordinates. The error is measured relative to the
    larger of the two values with a small absolute floor so near-zero
    coordinates do not inflate the ratio past finite-difference noise."""
    x = np.asarray(x, dtype=np.float64)
    flat_idx = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    worst = 0.0
    for fi in flat_idx:
        index = np.unravel_index(fi, x.shape)
        fd = central_difference(fn, x, index, h=h)
        an = grad[index]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
        worst = max(worst, err)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst}"
    return worst


@pytest.fixture(scope="session")
def small_population():
    """Tiny labeled dataset (6 identities x 4 images of 8x8) for training."""
    return synthesize_identities(6, 4, (8, 8, 1), seed=321)


@pytest.fixture(scope="session")
def small_mlp(small_population):
    images = np.stack([item.image for item in small_population])
    labels = np.array([item.identity for item in small_population])
    return MlpEmbedder(hidden_units=12, epochs=150, learning_rate=1.0, seed=9).fit(
        images, labels
    )
