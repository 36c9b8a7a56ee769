"""Differentiable embedding models with unit-norm features.

Two estimator kinds are built in:

* :class:`LinearEmbedder` - a fixed, seeded Gaussian random projection.
* :class:`MlpEmbedder` - one tanh hidden layer trained with softmax
  cross-entropy over identity labels; the embedding is the L2-normalized
  hidden activation vector.

Both expose ``embed`` / ``transform`` for features and ``input_gradient``
for exact vector-Jacobian products with respect to the input pixels,
which is all the mask optimizer needs. Gradients are hand-written
(normalization Jacobian applied to the cotangent, then the layer
adjoints) and are checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import as_pixel_array, check_image

MODEL_MAGIC = b"EMBM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHBIIIIII")

_KIND_LINEAR = 0
_KIND_MLP = 1


def feature_distance(a, b):
    """Squared Euclidean distance between two feature vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"feature shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d, d))


def squared_distances(features_a, features_b):
    """Pairwise squared distances, (Na, d) x (Nb, d) -> (Na, Nb).

    Computed from explicit differences rather than the expanded dot-product
    identity so the result matches a direct summation bit-for-bit closely.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _normalize_rows(v):
    r = np.sqrt(np.einsum("ij,ij->i", v, v))
    if np.any(r == 0.0):
        raise ValueError("zero-norm feature vector; cannot normalize")
    return v / r[:, None], r


def _pull_through_normalization(cot, y, r):
    # adjoint of v -> v/|v| is (u - (u.y) y) / |v|
    proj = np.einsum("ij,ij->i", cot, y)
    return (cot - proj[:, None] * y) / r[:, None]


class _EmbedderCore(BaseEstimator, TransformerMixin):
    """Shared plumbing: shape checks and single/batch adapters."""

    def _require_fitted(self):
        if not hasattr(self, "input_shape_"):
            raise ValueError(f"{type(self).__name__} is not fitted")

    def _check_input(self, x, batched):
        self._require_fitted()
        arr = as_pixel_array(x, "input")
        want = self.input_shape_
        if batched:
            if arr.ndim != 4 or arr.shape[1:] != want:
                raise ValueError(f"expected batch of shape (N,)+{want}, got {arr.shape}")
        else:
            if arr.shape != want:
                raise ValueError(f"expected input of shape {want}, got {arr.shape}")
        return arr

    def _flat(self, arr):
        return arr.reshape(arr.shape[0], -1)

    def embed(self, image):
        """Unit-norm feature vector for one image."""
        arr = self._check_input(image, batched=False)
        return self.transform(arr[None])[0]

    def input_gradient(self, image, cotangent, through_normalization=True):
        """d(cotangent . f(x)) / dx for one image, exact.

        ``through_normalization=False`` is a test hook that treats the raw
        (pre-normalization) feature map as the output.
        """
        arr = self._check_input(image, batched=False)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.output_dim_,):
            raise ValueError(
                f"cotangent must have shape ({self.output_dim_},), got {cot.shape}"
            )
        return self.input_gradient_batch(arr[None], cot[None], through_normalization)[0]

    def transform(self, X):
        arr = self._check_input(X, batched=True)
        return self._features(self._flat(arr))

    def input_gradient_batch(self, X, cotangents, through_normalization=True):
        arr = self._check_input(X, batched=True)
        cot = np.asarray(cotangents, dtype=np.float64)
        if cot.shape != (arr.shape[0], self.output_dim_):
            raise ValueError("cotangent batch shape mismatch")
        g = self._vjp(self._flat(arr), cot, through_normalization)
        return g.reshape(arr.shape)


class LinearEmbedder(_EmbedderCore):
    """Seeded Gaussian random projection with L2-normalized output.

    Parameters
    ----------
    n_components : embedding dimension d (must not exceed the pixel count).
    seed : RNG seed for the fixed projection; identical seeds reproduce
        bitwise-identical weights.
    """

    kind = "linear"

    def __init__(self, n_components=32, seed=0):
        self.n_components = n_components
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError("fit expects an image batch of shape (N, H, W, C)")
        self._init_from_shape(tuple(X.shape[1:]))
        return self

    def _init_from_shape(self, input_shape):
        n = int(np.prod(input_shape))
        if self.n_components > n:
            raise ValueError(
                f"n_components={self.n_components} exceeds flattened input size {n}"
            )
        if self.n_components < 1:
            raise ValueError("n_components must be positive")
        rng = np.random.default_rng(self.seed)
        self.weights_ = rng.standard_normal((self.n_components, n)) / np.sqrt(n)
        self.input_shape_ = tuple(input_shape)
        self.output_dim_ = self.n_components
        return self

    def _features(self, flat):
        y, _ = _normalize_rows(flat @ self.weights_.T)
        return y

    def _vjp(self, flat, cot, through_normalization):
        if through_normalization:
            y, r = _normalize_rows(flat @ self.weights_.T)
            cot = _pull_through_normalization(cot, y, r)
        return cot @ self.weights_


class MlpEmbedder(_EmbedderCore):
    """One-hidden-layer tanh network trained on identity labels.

    ``fit`` runs plain full-batch gradient descent on the softmax
    cross-entropy of a linear head over the hidden layer; the embedding
    used everywhere else is the L2-normalized hidden activation, so the
    feature dimension equals ``hidden_units``. Inputs are centered by the
    training-set pixel mean (stored with the model) so the hidden layer
    sees deviations rather than the shared image structure. Training is
    seeded and deterministic.
    """

    kind = "mlp"

    def __init__(self, hidden_units=128, epochs=600, learning_rate=1.0, seed=0):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError("fit expects an image batch of shape (N, H, W, C)")
        labels = np.asarray(y)
        if labels.shape != (X.shape[0],):
            raise ValueError("labels must be one integer per image")
        if self.hidden_units < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("hidden_units, epochs and learning_rate must be positive")
        classes, encoded = np.unique(labels, return_inverse=True)
        if classes.size < 2:
            raise ValueError("degenerate dataset: need at least 2 identities")
        counts = np.bincount(encoded)
        if counts.min() < 2:
            raise ValueError("degenerate dataset: need at least 2 images per identity")

        center = X.reshape(X.shape[0], -1).mean(axis=0)
        flat = X.reshape(X.shape[0], -1) - center
        n = flat.shape[1]
        k = classes.size
        rng = np.random.default_rng(self.seed)
        w1 = rng.standard_normal((self.hidden_units, n)) / np.sqrt(n)
        b1 = np.zeros(self.hidden_units)
        w2 = rng.standard_normal((k, self.hidden_units)) / np.sqrt(self.hidden_units)
        b2 = np.zeros(k)

        onehot = np.zeros((flat.shape[0], k))
        onehot[np.arange(flat.shape[0]), encoded] = 1.0
        lr = float(self.learning_rate)
        m = flat.shape[0]
        for _ in range(int(self.epochs)):
            hidden = np.tanh(flat @ w1.T + b1)
            logits = hidden @ w2.T + b2
            logits -= logits.max(axis=1, keepdims=True)
            expl = np.exp(logits)
            probs = expl / expl.sum(axis=1, keepdims=True)
            dlogits = (probs - onehot) / m
            dw2 = dlogits.T @ hidden
            db2 = dlogits.sum(axis=0)
            dhidden = dlogits @ w2
            da = dhidden * (1.0 - hidden * hidden)
            dw1 = da.T @ flat
            db1 = da.sum(axis=0)
            w2 -= lr * dw2
            b2 -= lr * db2
            w1 -= lr * dw1
            b1 -= lr * db1

        self.classes_ = classes
        self.center_ = center
        self.hidden_weights_ = w1
        self.hidden_bias_ = b1
        self.head_weights_ = w2
        self.head_bias_ = b2
        self.input_shape_ = tuple(X.shape[1:])
        self.output_dim_ = self.hidden_units
        self.train_accuracy_ = float(np.mean(self.predict(X) == labels))
        return self

    def _hidden(self, flat):
        return np.tanh(
            (flat - self.center_) @ self.hidden_weights_.T + self.hidden_bias_
        )

    def predict(self, X):
        arr = self._check_input(X, batched=True)
        logits = self._hidden(self._flat(arr)) @ self.head_weights_.T + self.head_bias_
        return self.classes_[np.argmax(logits, axis=1)]

    def _features(self, flat):
        y, _ = _normalize_rows(self._hidden(flat))
        return y

    def _vjp(self, flat, cot, through_normalization):
        hidden = self._hidden(flat)
        if through_normalization:
            y, r = _normalize_rows(hidden)
            cot = _pull_through_normalization(cot, y, r)
        return (cot * (1.0 - hidden * hidden)) @ self.hidden_weights_


def make_linear_model(seed, input_shape, n_components):
    """Fixed random-projection embedder for a known input shape."""
    model = LinearEmbedder(n_components=n_components, seed=seed)
    return model._init_from_shape(tuple(input_shape))


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the trained embedder and its synthetic training set."""

    epochs: int = 600
    learning_rate: float = 1.0
    seed: int = 0
    hidden_units: int = 128
    n_identities: int = 150
    images_per_identity: int = 10

    def __post_init__(self):
        counts = (self.epochs, self.hidden_units, self.n_identities, self.images_per_identity)
        if min(counts) < 1:
            raise ValueError("all TrainConfig counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def train_mlp_model(dataset, config=TrainConfig()):
    """Train an :class:`MlpEmbedder` on a list of labeled images."""
    if not dataset:
        raise ValueError("degenerate dataset: empty")
    images = np.stack([check_image(item.image) for item in dataset])
    labels = np.asarray([item.identity for item in dataset])
    model = MlpEmbedder(
        hidden_units=config.hidden_units,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        seed=config.seed,
    )
    return model.fit(images, labels)


def save_model(model, path):
    """Serialize an embedder to the flat EMBM binary format.

    Layout (little endian): magic "EMBM", version u16, kind u8
    (0 linear, 1 mlp), height u32, width u32, channels u32, output dim
    u32, hidden units u32 (0 for linear), class count u32 (0 for linear),
    then float64 parameter blocks in declaration order.
    """
    model._require_fitted()
    h, w, c = model.input_shape_
    if isinstance(model, LinearEmbedder):
        header = _MODEL_HEADER.pack(
            MODEL_MAGIC, MODEL_VERSION, _KIND_LINEAR, h, w, c, model.output_dim_, 0, 0
        )
        blocks = [model.weights_]
    elif isinstance(model, MlpEmbedder):
        header = _MODEL_HEADER.pack(
            MODEL_MAGIC,
            MODEL_VERSION,
            _KIND_MLP,
            h,
            w,
            c,
            model.output_dim_,
            model.hidden_units,
            model.classes_.size,
        )
        blocks = [
            model.center_,
            model.hidden_weights_,
            model.hidden_bias_,
            model.head_weights_,
            model.head_bias_,
            model.classes_.astype(np.float64),
        ]
    else:
        raise TypeError(f"cannot serialize model of type {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(header)
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_model(path):
    """Inverse of :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MODEL_HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, version, kind, h, w, c, dim, hidden, k = _MODEL_HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    params = np.frombuffer(blob, dtype="<f8", offset=_MODEL_HEADER.size)
    n = h * w * c

    def take(count, shape):
        nonlocal params
        if params.size < count:
            raise ValueError(f"{path}: truncated parameter payload")
        block, params = params[:count], params[count:]
        return block.reshape(shape).copy()

    if kind == _KIND_LINEAR:
        model = LinearEmbedder(n_components=dim)
        model.weights_ = take(dim * n, (dim, n))
        model.input_shape_ = (h, w, c)
        model.output_dim_ = dim
    elif kind == _KIND_MLP:
        model = MlpEmbedder(hidden_units=hidden)
        model.center_ = take(n, (n,))
        model.hidden_weights_ = take(hidden * n, (hidden, n))
        model.hidden_bias_ = take(hidden, (hidden,))
        model.head_weights_ = take(k * hidden, (k, hidden))
        model.head_bias_ = take(k, (k,))
        model.classes_ = take(k, (k,)).astype(np.int64)
        model.input_shape_ = (h, w, c)
        model.output_dim_ = dim
    else:
        raise ValueError(f"{path}: unknown model kind {kind}")
    if params.size:
        raise ValueError(f"{path}: trailing bytes after parameters")
    return model
