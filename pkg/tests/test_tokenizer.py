"""Codebook fitting, round-trips, tie-breaks, serialization."""

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from styletune import synthdata as sd
from styletune import tokenizer as tk


def uniform_patch(color, patch_size=4):
    return np.full((patch_size * patch_size * 3,), color, dtype=np.float64)


def test_patch_round_trip_layout():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    patches = tk.image_to_patches(img, 4)
    assert patches.shape == (64, 48)
    assert np.array_equal(tk.patches_to_image(patches, 4), img)
    # Row-major order: the second patch starts at column 4 of row 0.
    assert np.array_equal(patches[1].reshape(4, 4, 3), img[0:4, 4:8])


def test_fit_recovers_distinct_uniform_colors_exactly():
    # Colors on powers-of-two grid (k/256) so cluster means are exact in fp.
    colors = [k / 256.0 for k in range(0, 256, 16)]  # 16 distinct levels
    imgs = []
    rng = np.random.default_rng(1)
    for c in colors:
        img = np.full((8, 8, 3), c)
        imgs.extend([img.copy() for _ in range(3)])
    cb = tk.fit_codebook(imgs, K=16, patch_size=4, seed=5)
    got = sorted(cb.centroids[:, 0].tolist())
    assert got == sorted(colors)
    assert np.all(cb.centroids == cb.centroids[:, :1])  # uniform rows


def test_fit_errors_when_too_few_distinct_patches():
    imgs = [np.zeros((8, 8, 3)), np.ones((8, 8, 3))]
    with pytest.raises(ValueError):
        tk.fit_codebook(imgs, K=8, patch_size=4, seed=0)


def test_fit_deterministic_per_seed(catalog):
    imgs = [e.image for e in catalog[:60]]
    a = tk.fit_codebook(imgs, K=32, patch_size=4, seed=3)
    b = tk.fit_codebook(imgs, K=32, patch_size=4, seed=3)
    c = tk.fit_codebook(imgs, K=32, patch_size=4, seed=4)
    assert np.array_equal(a.centroids, b.centroids)
    assert not np.array_equal(a.centroids, c.centroids)


def test_centroids_pairwise_distinct_under_reseed_pressure(catalog):
    # K close to the corpus' unique-patch count forces empty-cluster reseeds.
    imgs = [e.image for e in catalog[:8]]
    uniq = np.unique(np.concatenate([tk.image_to_patches(im, 4) for im in imgs]), axis=0)
    K = max(8, uniq.shape[0] - 2)
    cb = tk.fit_codebook(imgs, K=K, patch_size=4, seed=0)
    assert np.unique(cb.centroids, axis=0).shape[0] == K


def test_exact_tie_resolves_to_lowest_index():
    cent = np.stack([uniform_patch(0.9)] * 10)
    cent[3] = uniform_patch(0.0)
    cent[7] = uniform_patch(1.0)
    for i in [0, 1, 2, 4, 5, 6, 8, 9]:
        cent[i] = uniform_patch(10.0 + i)  # distinct and far from the tie pair
    cb = tk.Codebook(centroids=cent, patch_size=4)
    img = tk.patches_to_image(np.stack([uniform_patch(0.5)] * 4), 4)
    tokens = tk.encode(img, cb)
    assert np.all(tokens == 3)  # equidistant from 3 and 7 -> lowest wins


def test_encode_decode_idempotent_on_catalog(catalog, codebook):
    for e in catalog[::97]:
        v = tk.encode(e.image, codebook)
        assert v.shape == (64,)
        assert np.array_equal(tk.encode(tk.decode(v, codebook), codebook), v)


def test_decode_rejects_mask_and_out_of_range(codebook):
    v = np.zeros(64, dtype=np.int64)
    v[5] = codebook.mask_id
    with pytest.raises(ValueError, match="incomplete grid"):
        tk.decode(v, codebook)
    v[5] = codebook.K + 3
    with pytest.raises(ValueError):
        tk.decode(v, codebook)


def test_reconstruction_mse_equals_brute_force_bound(catalog, codebook):
    for e in catalog[::191]:
        patches = tk.image_to_patches(e.image, codebook.patch_size)
        recon = tk.decode(tk.encode(e.image, codebook), codebook)
        mse = ((recon - e.image) ** 2).mean()
        bound = cdist(patches, codebook.centroids, "sqeuclidean").min(axis=1).mean() / patches.shape[1]
        assert abs(mse - bound) < 1e-12


def test_serialization_round_trip(tmp_path, codebook):
    p = tmp_path / "cb.bin"
    tk.save_codebook(codebook, p)
    loaded = tk.load_codebook(p)
    assert loaded.K == codebook.K and loaded.patch_size == codebook.patch_size
    np.testing.assert_array_equal(
        loaded.centroids, codebook.centroids.astype("<f4").astype(np.float64)
    )
    p2 = tmp_path / "cb2.bin"
    tk.save_codebook(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()
    raw = p.read_bytes()
    header = raw[: raw.index(b"\n")].decode()
    assert '"version": 1' in header or '"version":1' in header.replace(" ", "")


def test_loaded_codebook_still_idempotent(tmp_path, catalog, codebook):
    p = tmp_path / "cb.bin"
    tk.save_codebook(codebook, p)
    cb = tk.load_codebook(p)
    img = catalog[37].image
    v = tk.encode(img, cb)
    assert np.array_equal(tk.encode(tk.decode(v, cb), cb), v)
