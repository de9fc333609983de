"""Patch tokenizer: a k-means codebook over flattened image patches.

Images are cut into non-overlapping ``patch_size`` squares (row-major),
each flattened to a length ``patch_size**2 * 3`` vector.  ``encode`` maps
patches to nearest-centroid indices (exact L2, ties to the lowest index);
``decode`` pastes centroids back.  Token ``K`` is the MASK sentinel - it is
never a centroid and cannot be decoded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CODEBOOK_VERSION = 1


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, patch_size**2 * 3) float64
    patch_size: int

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def mask_id(self) -> int:
        return self.K


def image_to_patches(img: np.ndarray, patch_size: int) -> np.ndarray:
    h, w, c = img.shape
    if h != w or h % patch_size:
        raise ValueError(f"image {h}x{w} not divisible into {patch_size}-patches")
    g = h // patch_size
    return (
        img.reshape(g, patch_size, g, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch_size * patch_size * c)
    )


def patches_to_image(patches: np.ndarray, patch_size: int) -> np.ndarray:
    n, p = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError("patch count is not a square grid")
    c = p // (patch_size * patch_size)
    return (
        patches.reshape(g, g, patch_size, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * patch_size, g * patch_size, c)
    )


def _assign(patches: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Fast squared-distance argmin (fit-time only; ties are irrelevant there)."""
    d2 = (
        (patches * patches).sum(axis=1)[:, None]
        - 2.0 * patches @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return d2.argmin(axis=1)


def fit_codebook(
    images: list[np.ndarray],
    K: int = 128,
    patch_size: int = 4,
    seed: int = 0,
    max_iter: int = 60,
) -> Codebook:
    """Seeded Lloyd iterations; empty clusters re-seed from the farthest patches."""
    P = np.concatenate([image_to_patches(im, patch_size) for im in images])
    uniq = np.unique(P, axis=0)
    if uniq.shape[0] < K:
        raise ValueError(f"only {uniq.shape[0]} distinct patches for K={K}")
    rng = np.random.default_rng(seed)
    cent = uniq[rng.choice(uniq.shape[0], size=K, replace=False)].copy()

    prev = None
    for _ in range(max_iter):
        assign = _assign(P, cent)
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, P)
        empty = np.nonzero(counts == 0)[0]
        if empty.size:
            # Hand each empty cluster its own farthest-from-home patch.
            d = ((P - cent[assign]) ** 2).sum(axis=1)
            far = np.argsort(-d, kind="stable")[: empty.size]
            nonzero = counts > 0
            cent[nonzero] = sums[nonzero] / counts[nonzero, None]
            cent[empty] = P[far]
            prev = None
            continue
        cent = sums / counts[:, None]
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign

    # Pairwise-distinct centroids are required for encode/decode idempotence.
    for _ in range(5):
        _, first = np.unique(cent, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(K), first)
        if dup.size == 0:
            break
        assign = _assign(P, cent)
        d = ((P - cent[assign]) ** 2).sum(axis=1)
        far = np.argsort(-d, kind="stable")[: dup.size]
        cent[dup] = P[far]
    else:  # pragma: no cover - pathological corpora only
        raise RuntimeError("could not make centroids pairwise distinct")
    return Codebook(centroids=cent, patch_size=patch_size)


def encode(img: np.ndarray, cb: Codebook) -> np.ndarray:
    """Token grid (flattened, row-major) of nearest centroids; exact tie-break."""
    patches = image_to_patches(img, cb.patch_size)
    # Exact per-pair distances so equal-distance ties really go to the
    # lowest index (the expansion trick would add noise on the order 1e-16).
    d2 = ((patches[:, None, :] - cb.centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1).astype(np.int64)


def decode(tokens: np.ndarray, cb: Codebook) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.min(initial=0) < 0 or tokens.max(initial=-1) > cb.K:
        raise ValueError("token id out of range")
    if np.any(tokens == cb.mask_id):
        raise ValueError("incomplete grid: MASK tokens cannot be decoded")
    return patches_to_image(cb.centroids[tokens], cb.patch_size)


def save_codebook(cb: Codebook, path: Path) -> None:
    header = json.dumps(
        {"K": cb.K, "patch_size": cb.patch_size, "version": CODEBOOK_VERSION}
    )
    payload = np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
    Path(path).write_bytes(header.encode() + b"\n" + payload)


def load_codebook(path: Path) -> Codebook:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    meta = json.loads(raw[:nl].decode())
    if meta.get("version") != CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {meta.get('version')}")
    K, ps = meta["K"], meta["patch_size"]
    cent = np.frombuffer(raw[nl + 1 :], dtype="<f4").astype(np.float64)
    return Codebook(centroids=cent.reshape(K, ps * ps * 3), patch_size=ps)
