import hashlib

import numpy as np
import pytest

from idmask.embedding import (
    MlpEmbedder,
    TrainConfig,
    feature_distance,
    load_model,
    make_linear_model,
    save_model,
    train_mlp_model,
)
from idmask.protocol import synthesize_identities

from conftest import gradcheck


def test_linear_identity_rows_map_basis_vector():
    model = make_linear_model(0, (2, 2, 1), 2)
    model.weights_ = np.eye(2, 4)
    image = np.zeros((2, 2, 1))
    image[0, 0, 0] = 1.0
    feat = model.embed(image)
    assert np.allclose(feat, [1.0, 0.0])


def test_embedding_deterministic():
    model = make_linear_model(3, (4, 4, 1), 8)
    x = np.random.default_rng(0).uniform(0, 1, (4, 4, 1))
    assert np.array_equal(model.embed(x), model.embed(x))


def test_unit_norm_property():
    rng = np.random.default_rng(11)
    model = make_linear_model(5, (4, 4, 1), 8)
    for _ in range(1000):
        x = rng.uniform(0, 1, (4, 4, 1))
        assert abs(np.linalg.norm(model.embed(x)) - 1.0) < 1e-9


def test_same_seed_same_weights():
    a = make_linear_model(7, (4, 4, 1), 6)
    b = make_linear_model(7, (4, 4, 1), 6)
    assert np.array_equal(a.weights_, b.weights_)
    c = make_linear_model(8, (4, 4, 1), 6)
    assert not np.array_equal(a.weights_, c.weights_)


# frozen at first build: sha256 of the seed-7 projection for an 8x8 input
GOLDEN_LINEAR_SHA = "a5a9879b39da43195495eac6937603baf1d5233a370a520983699bdc3b9a1c97"


def test_linear_golden_checksum():
    model = make_linear_model(7, (8, 8, 1), 16)
    digest = hashlib.sha256(model.weights_.tobytes()).hexdigest()
    assert digest == GOLDEN_LINEAR_SHA


def test_n_components_bounded():
    with pytest.raises(ValueError, match="exceeds"):
        make_linear_model(0, (2, 2, 1), 5)


def test_feature_distance_cases():
    a = np.zeros(4)
    a[0] = 1.0
    assert feature_distance(a, a) == 0.0
    assert feature_distance(a, -a) == 4.0
    rng = np.random.default_rng(2)
    for _ in range(50):
        u = rng.standard_normal(6)
        u /= np.linalg.norm(u)
        v = rng.standard_normal(6)
        v /= np.linalg.norm(v)
        direct = sum((x - y) ** 2 for x, y in zip(u, v))
        assert abs(feature_distance(u, v) - direct) < 1e-12
        assert feature_distance(u, v) == feature_distance(v, u)


def test_shape_mismatch_rejected(small_mlp):
    with pytest.raises(ValueError, match="shape"):
        small_mlp.embed(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        feature_distance(np.zeros(3), np.zeros(4))


def test_zero_cotangent_gives_zero_gradient(small_mlp):
    x = np.random.default_rng(0).uniform(0.2, 0.8, (8, 8, 1))
    g = small_mlp.input_gradient(x, np.zeros(small_mlp.output_dim_))
    assert np.all(g == 0.0)


def test_linear_adjoint_without_normalization():
    model = make_linear_model(4, (3, 3, 1), 5)
    cot = np.random.default_rng(1).standard_normal(5)
    x = np.random.default_rng(2).uniform(0, 1, (3, 3, 1))
    g = model.input_gradient(x, cot, through_normalization=False)
    assert np.allclose(g.reshape(-1), model.weights_.T @ cot, atol=0, rtol=0)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_input_gradient_matches_finite_differences(kind, small_mlp):
    rng = np.random.default_rng(13)
    if kind == "linear":
        model = make_linear_model(21, (8, 8, 1), 12)
    else:
        model = small_mlp
    for trial in range(3):
        x = rng.uniform(0.1, 0.9, (8, 8, 1))
        cot = rng.standard_normal(model.output_dim_)

        def head(img):
            return float(cot @ model.embed(img))

        grad = model.input_gradient(x, cot)
        gradcheck(head, grad, x, rng, n_coords=8, rtol=1e-6)


def test_mlp_trains_two_constant_identities():
    imgs = []
    labels = []
    rng = np.random.default_rng(5)
    for ident, level in ((0, 0.1), (1, 0.9)):
        for _ in range(10):
            img = np.clip(np.full((4, 4, 1), level) + rng.normal(0, 0.01, (4, 4, 1)), 0, 1)
            imgs.append(img)
            labels.append(ident)
    model = MlpEmbedder(hidden_units=4, epochs=200, learning_rate=1.0, seed=0).fit(
        np.stack(imgs), np.array(labels)
    )
    assert model.train_accuracy_ == 1.0


def test_mlp_training_deterministic(small_population):
    images = np.stack([item.image for item in small_population])
    labels = np.array([item.identity for item in small_population])
    a = MlpEmbedder(hidden_units=8, epochs=50, learning_rate=1.0, seed=4).fit(images, labels)
    b = MlpEmbedder(hidden_units=8, epochs=50, learning_rate=1.0, seed=4).fit(images, labels)
    assert np.array_equal(a.hidden_weights_, b.hidden_weights_)
    assert np.array_equal(a.head_weights_, b.head_weights_)


def test_mlp_separates_heldout_samples(small_mlp):
    held = synthesize_identities(6, 2, (8, 8, 1), seed=654)
    feats = small_mlp.transform(np.stack([h.image for h in held]))
    labels = np.array([h.identity for h in held])
    intra, inter = [], []
    for i in range(len(held)):
        for j in range(i + 1, len(held)):
            d = float(np.sum((feats[i] - feats[j]) ** 2))
            (intra if labels[i] == labels[j] else inter).append(d)
    assert np.mean(intra) < np.mean(inter)


def test_mlp_rejects_degenerate_dataset():
    with pytest.raises(ValueError, match="identities"):
        MlpEmbedder().fit(np.zeros((4, 2, 2, 1)), np.zeros(4, dtype=int))
    with pytest.raises(ValueError, match="2 images"):
        MlpEmbedder().fit(np.zeros((3, 2, 2, 1)), np.array([0, 1, 1]))


def test_train_mlp_model_wrapper(small_population):
    model = train_mlp_model(
        small_population, TrainConfig(epochs=60, hidden_units=8, seed=1, n_identities=6)
    )
    assert model.train_accuracy_ > 0.9


def test_model_save_load_round_trip(tmp_path, small_mlp):
    path = tmp_path / "m.embm"
    save_model(small_mlp, path)
    back = load_model(path)
    x = np.random.default_rng(0).uniform(0, 1, (1, 8, 8, 1))
    assert np.array_equal(back.transform(x), small_mlp.transform(x))
    assert np.array_equal(back.predict(x), small_mlp.predict(x))

    lin = make_linear_model(9, (8, 8, 1), 10)
    save_model(lin, tmp_path / "l.embm")
    back_lin = load_model(tmp_path / "l.embm")
    assert np.array_equal(back_lin.weights_, lin.weights_)
    assert back_lin.input_shape_ == lin.input_shape_


def test_model_load_rejects_garbage(tmp_path):
    path = tmp_path / "x.embm"
    path.write_bytes(b"EMBMxx")
    with pytest.raises(ValueError):
        load_model(path)
    path.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(ValueError, match="magic"):
        load_model(path)
