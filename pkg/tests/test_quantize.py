import numpy as np
import pytest

from autopalette.errors import ParameterError
from autopalette.quantize import (
    JOINT, PER_CHANNEL, median_cut, median_cut_indices, octree_quantize,
    quantization_mse, unique_channel_values, unique_colors,
)


def rand_image(rng, hw=(8, 8), lo=0, hi=256):
    return rng.integers(lo, hi, size=(3, *hw), dtype=np.uint8)


# -------------------------------------------------- median cut

def test_constant_image_one_color(rng):
    img = np.full((3, 4, 4), 93, dtype=np.uint8)
    for k in (1, 2, 7):
        q = median_cut(img, k)
        assert np.array_equal(q.reconstruct(), img)
        assert unique_colors(q.reconstruct()) == 1


def test_per_channel_two_value_split():
    img = np.zeros((1, 1, 4), dtype=np.uint8)
    img[0, 0] = [0, 0, 255, 255]
    q = median_cut(img, 2, mode=PER_CHANNEL)
    assert list(q.palette[0]) == [0, 255]
    assert list(q.indices[0, 0]) == [0, 0, 1, 1]


def test_lossless_when_unique_colors_at_most_k(rng):
    for _ in range(10):
        img = rand_image(rng, hw=(6, 6), lo=0, hi=5)  # few distinct colors
        u = unique_colors(img)
        q = median_cut(img, max(u, 1))
        assert quantization_mse(img, q) == 0.0


def test_per_channel_lossless_when_k_covers_values(rng):
    img = rand_image(rng, hw=(6, 6), lo=0, hi=7)
    k = max(unique_channel_values(img))
    q = median_cut(img, k, mode=PER_CHANNEL)
    assert quantization_mse(img, q) == 0.0


def test_mse_non_increasing_in_k(rng):
    for _ in range(5):
        img = rand_image(rng, hw=(16, 16))
        last = np.inf
        for k in (2, 4, 8, 16, 32, 64, 128, 256):
            mse = quantization_mse(img, median_cut(img, k))
            assert mse <= last + 1e-15
            last = mse


def test_palette_entries_are_member_means(rng):
    img = rand_image(rng, hw=(8, 8))
    q = median_cut(img, 7)
    pixels = img.reshape(3, -1).T
    idx = q.indices.reshape(-1)
    for b in np.unique(idx):
        members = pixels[idx == b]
        expected = np.floor(members.mean(axis=0) + 0.5)
        assert np.array_equal(q.palette[b], expected.astype(np.uint8))
        assert (q.palette[b] >= members.min(axis=0)).all()
        assert (q.palette[b] <= members.max(axis=0)).all()


def test_median_cut_deterministic(rng):
    img = rand_image(rng, hw=(16, 16))
    a = median_cut(img, 13)
    b = median_cut(img, 13)
    assert np.array_equal(a.palette, b.palette)
    assert np.array_equal(a.indices, b.indices)


def test_k_larger_than_pixels_rejected(rng):
    with pytest.raises(ParameterError):
        median_cut(rand_image(rng, hw=(2, 2)), 5)


def test_unique_value_bound_per_channel(rng):
    img = rand_image(rng, hw=(16, 16))
    for k in (2, 5, 16):
        q = median_cut(img, k, mode=PER_CHANNEL)
        assert max(unique_channel_values(q.reconstruct())) <= k
        q = median_cut(img, k, mode=JOINT)
        assert unique_colors(q.reconstruct()) <= k


def test_median_cut_indices_shape(rng):
    img = rand_image(rng, hw=(8, 8))
    idx = median_cut_indices(img, 4)
    assert idx.shape == (3, 8, 8)
    assert idx.max() < 4


# -------------------------------------------------- octree

def test_octree_lossless_when_few_colors(rng):
    img = rand_image(rng, hw=(6, 6), lo=0, hi=4)
    q = octree_quantize(img, 256)
    assert quantization_mse(img, q) == 0.0


def test_octree_k1_is_global_mean(rng):
    img = rand_image(rng, hw=(8, 8))
    q = octree_quantize(img, 1)
    mean = np.floor(img.reshape(3, -1).mean(axis=1) + 0.5).astype(np.uint8)
    recon = q.reconstruct()
    for ch in range(3):
        assert (recon[ch] == mean[ch]).all()


def test_octree_two_clusters(rng):
    # two tight clusters; with K=2 each bucket mean must be the nearest mean
    base_a, base_b = np.array([40, 45, 50]), np.array([200, 190, 210])
    px = []
    for _ in range(30):
        px.append(np.clip(base_a + rng.integers(-3, 4, 3), 0, 255))
        px.append(np.clip(base_b + rng.integers(-3, 4, 3), 0, 255))
    img = np.array(px, dtype=np.uint8).T.reshape(3, 6, 10)
    q = octree_quantize(img, 2)
    recon = q.reconstruct().reshape(3, -1).T
    pixels = img.reshape(3, -1).T.astype(np.float64)
    # brute force: nearest of the two bucket means
    means = np.unique(recon, axis=0).astype(np.float64)
    assert means.shape[0] == 2
    d = ((pixels[:, None, :] - means[None]) ** 2).sum(axis=2)
    nearest = means[d.argmin(axis=1)]
    assert np.allclose(recon, nearest, atol=1.0)


def test_octree_no_error_when_k_exceeds_unique(rng):
    img = rand_image(rng, hw=(4, 4), lo=0, hi=3)
    q = octree_quantize(img, 200)
    assert quantization_mse(img, q) == 0.0


def test_octree_deterministic(rng):
    img = rand_image(rng, hw=(12, 12))
    a, b = octree_quantize(img, 9), octree_quantize(img, 9)
    assert np.array_equal(a.palette, b.palette)
    assert np.array_equal(a.indices, b.indices)


# -------------------------------------------------- metrics

def test_mse_identical_zero(rng):
    img = rand_image(rng)
    assert quantization_mse(img, img) == 0.0


def test_mse_black_vs_white_is_one():
    a = np.zeros((3, 4, 4), dtype=np.uint8)
    b = np.full((3, 4, 4), 255, dtype=np.uint8)
    assert quantization_mse(a, b) == 1.0


def test_mse_zero_when_k_covers_everything(rng):
    img = rand_image(rng, hw=(4, 4))  # at most 16 distinct colors
    q = median_cut(img, 16)
    assert quantization_mse(img, q) == 0.0
