import numpy as np
import pytest

from idmask.metrics import PSNR_CAP_DB, psnr, ssim


def naive_ssim(a, b):
    """Direct windowed implementation used as the independent oracle."""
    size, sigma, k1, k2 = 11, 1.5, 0.01, 0.03
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = k1**2, k2**2
    h, w, channels = a.shape
    scores = []
    for c in range(channels):
        vals = []
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                x = a[i : i + size, j : j + size, c]
                y = b[i : i + size, j : j + size, c]
                mx = float((win * x).sum())
                my = float((win * y).sum())
                vx = float((win * x * x).sum()) - mx * mx
                vy = float((win * y * y).sum()) - my * my
                vxy = float((win * x * y).sum()) - mx * my
                vals.append(
                    ((2 * mx * my + c1) * (2 * vxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
        scores.append(np.mean(vals))
    return float(np.mean(scores))


def test_psnr_identical_is_capped():
    img = np.random.default_rng(0).uniform(0, 1, (6, 6, 1))
    assert psnr(img, img.copy()) == PSNR_CAP_DB == 99.0


def test_psnr_uniform_difference():
    a = np.full((5, 5, 1), 0.6)
    b = np.full((5, 5, 1), 0.5)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_direct_mse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform(0, 1, (7, 5, 3))
        b = rng.uniform(0, 1, (7, 5, 3))
        mse = float(np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_psnr_symmetry():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (6, 6, 1))
    b = rng.uniform(0, 1, (6, 6, 1))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 1)), np.zeros((5, 4, 1)))


def test_ssim_identical_is_one():
    img = np.random.default_rng(3).uniform(0, 1, (12, 12, 1))
    assert ssim(img, img.copy()) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_below_one():
    rng = np.random.default_rng(4)
    a = rng.uniform(0.1, 0.9, (12, 12, 1))
    assert ssim(a, 1.0 - a) < 1.0


# frozen once from the naive windowed oracle on the seed-2024 fixture pair
GOLDEN_SSIM_16 = 0.9292137502016653


def test_ssim_golden_fixture():
    rng = np.random.default_rng(2024)
    a = rng.uniform(0, 1, (16, 16, 1))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    value = ssim(a, b)
    assert value == pytest.approx(naive_ssim(a, b), abs=1e-12)
    assert value == pytest.approx(GOLDEN_SSIM_16, abs=1e-12)


def test_ssim_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(3):
        a = rng.uniform(0, 1, (13, 12, 1))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-12)


def test_ssim_channel_averaged():
    rng = np.random.default_rng(6)
    a = rng.uniform(0, 1, (12, 12, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    per_channel = [
        ssim(a[:, :, c : c + 1], b[:, :, c : c + 1]) for c in range(3)
    ]
    assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="11"):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))
