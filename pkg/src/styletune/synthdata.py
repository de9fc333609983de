"""Procedural styled-image corpus plus label oracles.

A style is a palette (background, fill, accent), a background texture, and a
stroke width; a content is a shape and a scale.  ``render`` composes the two
deterministically from a seed.  Images are 32x32 RGB float64 in [0, 1],
quantized to 8-bit levels so PNG round-trips are exact.

The oracles are two multinomial softmax classifiers over handcrafted
features; they are the referees for every downstream generation test, so
they live here, far away from the generative path, and refuse to train
below a fixed held-out accuracy gate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# ---------------------------------------------------------------------------
# Catalog configuration
# ---------------------------------------------------------------------------

IMG_SIZE = 32
TEXTURES = ("flat", "stripes", "dots", "gradient", "noise-grain")
SHAPES = ("circle", "triangle", "square", "letter-glyph", "cross", "ring")

# Palette channel levels sit on exact 8-bit codes (k/255) so quantized
# pixels equal the spec values bit-for-bit, and inside 4-bin histogram bins.
_L = tuple(k / 255.0 for k in (32, 96, 160, 224))

MIN_PALETTE_DIST = 0.2
DEFAULT_SEEDS_PER_CELL = 20

# Style excluded from generative pretraining (oracles still train on it).
HELD_OUT_STYLE_ID = 7
# Content excluded from pretraining in the composition experiment.
HELD_OUT_CONTENT_ID = 5


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    name: str
    palette: tuple  # (background, fill, accent), each an RGB triple in [0,1]
    texture: str
    stroke_width: int

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.stroke_width < 1:
            raise ValueError("stroke_width must be >= 1")
        if len(self.palette) != 3:
            raise ValueError("palette needs exactly 3 colors")
        cols = [np.asarray(c, dtype=np.float64) for c in self.palette]
        for c in cols:
            if c.shape != (3,) or c.min() < 0.0 or c.max() > 1.0:
                raise ValueError("palette colors must be RGB triples in [0,1]")
        for i in range(3):
            for j in range(i + 1, 3):
                if np.linalg.norm(cols[i] - cols[j]) < MIN_PALETTE_DIST:
                    raise ValueError(
                        f"palette colors {i} and {j} closer than {MIN_PALETTE_DIST}"
                    )


@dataclass(frozen=True)
class ContentSpec:
    content_id: int
    name: str
    shape: str
    scale: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not (0.3 < self.scale < 0.9):
            raise ValueError("scale must lie in (0.3, 0.9)")


def default_styles() -> list[StyleSpec]:
    L0, L1, L2, L3 = _L
    rows = [
        ("ember", "flat", ((L3, L1, L0), (L1, L0, L0), (L3, L3, L1)), 1),
        ("ocean", "stripes", ((L0, L1, L3), (L3, L3, L3), (L0, L2, L2)), 2),
        ("moss", "dots", ((L0, L1, L0), (L2, L3, L1), (L3, L3, L2)), 1),
        ("slate", "gradient", ((L1, L1, L1), (L3, L2, L0), (L0, L0, L0)), 2),
        ("coral", "noise-grain", ((L3, L2, L2), (L2, L0, L1), (L3, L3, L3)), 1),
        ("dune", "stripes", ((L3, L3, L2), (L2, L1, L0), (L3, L2, L1)), 1),
        ("berry", "flat", ((L1, L0, L1), (L3, L1, L2), (L2, L2, L3)), 2),
        ("frost", "dots", ((L2, L3, L3), (L0, L1, L2), (L3, L3, L3)), 1),
    ]
    return [
        StyleSpec(i, name, palette, texture=tex, stroke_width=sw)
        for i, (name, tex, palette, sw) in enumerate(rows)
    ]


def default_contents() -> list[ContentSpec]:
    rows = [
        ("circle", "circle", 0.70),
        ("triangle", "triangle", 0.80),
        ("square", "square", 0.65),
        ("glyph", "letter-glyph", 0.75),
        ("cross", "cross", 0.75),
        ("ring", "ring", 0.80),
    ]
    return [ContentSpec(i, n, shape, scale) for i, (n, shape, scale) in enumerate(rows)]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Binary erosion with the 4-neighborhood, edges treated as background."""
    m = mask
    for _ in range(iterations):
        padded = np.pad(m, 1, mode="constant")
        m = (
            m
            & padded[:-2, 1:-1]
            & padded[2:, 1:-1]
            & padded[1:-1, :-2]
            & padded[1:-1, 2:]
        )
    return m


def _shape_mask(shape: str, scale: float, cx: float, cy: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = scale * size / 2.0
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        s = 0.8 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "cross":
        s, t = r, max(2.0, 0.35 * r)
        return ((np.abs(dx) <= t) | (np.abs(dy) <= t)) & (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "letter-glyph":
        # A blocky "T": top bar plus center stem.
        s = r
        bar = max(2.0, 0.4 * r)
        t = max(2.0, 0.35 * r)
        top = (dy >= -s) & (dy <= -s + bar) & (np.abs(dx) <= s)
        stem = (np.abs(dx) <= t) & (dy >= -s) & (dy <= s)
        return top | stem
    if shape == "triangle":
        # Upward triangle via three half-plane tests.
        ax, ay = cx, cy - r
        bx, by = cx - 0.95 * r, cy + 0.8 * r
        qx, qy = cx + 0.95 * r, cy + 0.8 * r

        def side(px, py, x0, y0, x1, y1):
            return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)

        d1 = side(xx, yy, ax, ay, bx, by)
        d2 = side(xx, yy, bx, by, qx, qy)
        d3 = side(xx, yy, qx, qy, ax, ay)
        return ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
    raise ValueError(f"unknown shape {shape!r}")


def _background(style: StyleSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = np.asarray(style.palette[0])
    c2 = np.asarray(style.palette[2])
    img = np.empty((size, size, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    if style.texture == "flat":
        img[:] = c0
    elif style.texture == "stripes":
        phase = int(rng.integers(0, 6))
        band = ((xx + yy + phase) % 6) < 3
        img[:] = np.where(band[..., None], c0, c2)
    elif style.texture == "dots":
        ox, oy = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        dots = (((xx + ox) % 5) < 2) & (((yy + oy) % 5) < 2)
        img[:] = np.where(dots[..., None], c2, c0)
    elif style.texture == "gradient":
        t = (yy / (size - 1))[..., None]
        img[:] = (1.0 - t) * c0 + t * c2
    elif style.texture == "noise-grain":
        m = rng.random((size, size, 1)) * 0.6
        img[:] = (1.0 - m) * c0 + m * c2
    else:  # pragma: no cover - guarded by StyleSpec validation
        raise ValueError(style.texture)
    return img


def render(style: StyleSpec, content: ContentSpec, seed: int, size: int = IMG_SIZE) -> np.ndarray:
    """Deterministic render of (style, content, seed) to an RGB float image."""
    rng = np.random.default_rng([style.style_id, content.content_id, int(seed)])
    img = _background(style, rng, size)
    jx, jy = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    cx, cy = size / 2.0 + jx, size / 2.0 + jy
    fill = _shape_mask(content.shape, content.scale, cx, cy, size)
    edge = fill & ~_erode(fill, style.stroke_width)
    img[fill] = np.asarray(style.palette[1])
    img[edge] = np.asarray(style.palette[2])
    # Snap to exact 8-bit codes so saving and reloading a PNG is lossless.
    return np.round(img * 255.0) / 255.0


def to_png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(img: np.ndarray, path: Path) -> None:
    Path(path).write_bytes(to_png_bytes(img))


def load_png(path: Path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Catalog generation and on-disk manifest
# ---------------------------------------------------------------------------


@dataclass
class LabeledExample:
    style_id: int
    content_id: int
    seed: int
    image: np.ndarray


def generate_catalog(
    styles: list[StyleSpec] | None = None,
    contents: list[ContentSpec] | None = None,
    seeds_per_cell: int = DEFAULT_SEEDS_PER_CELL,
) -> list[LabeledExample]:
    styles = default_styles() if styles is None else styles
    contents = default_contents() if contents is None else contents
    out = []
    for st in styles:
        for ct in contents:
            for seed in range(seeds_per_cell):
                out.append(
                    LabeledExample(st.style_id, ct.content_id, seed, render(st, ct, seed))
                )
    return out


def save_dataset(examples: list[LabeledExample], root: Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for ex in examples:
        rel = f"images/s{ex.style_id:02d}_c{ex.content_id:02d}_r{ex.seed:04d}.png"
        save_png(ex.image, root / rel)
        entries.append(
            {
                "style_id": ex.style_id,
                "content_id": ex.content_id,
                "seed": ex.seed,
                "file": rel,
            }
        )
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"size": IMG_SIZE, "images": entries}, indent=1))
    return manifest


def load_dataset(root: Path) -> list[LabeledExample]:
    root = Path(root)
    spec = json.loads((root / "manifest.json").read_text())
    out = []
    for e in spec["images"]:
        out.append(
            LabeledExample(e["style_id"], e["content_id"], e["seed"], load_png(root / e["file"]))
        )
    return out


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

_QBINS = 4  # per-channel histogram bins; palette levels sit inside them


def _quantize_index(img: np.ndarray) -> np.ndarray:
    q = np.clip((img * _QBINS).astype(np.int64), 0, _QBINS - 1)
    return q[..., 0] * _QBINS * _QBINS + q[..., 1] * _QBINS + q[..., 2]


def _foreground_mask(img: np.ndarray) -> np.ndarray:
    """The most spatially compact quantized color of moderate area.

    Shape fills are contiguous blobs; background textures spread their colors
    across the frame.  Picking the color with the smallest coordinate spread
    segments the shape without knowing any palette.
    """
    idx = _quantize_index(img)
    n = img.shape[0] * img.shape[1]
    counts = np.bincount(idx.ravel(), minlength=_QBINS**3)
    cand = np.nonzero((counts >= 25) & (counts <= n * 0.6))[0]
    if cand.size == 0:
        mode = int(np.argmax(counts))
        return idx != mode
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    best, best_spread = None, np.inf
    for c in cand:
        m = idx == c
        ys, xs = yy[m], xx[m]
        spread = ys.var() + xs.var()
        if spread < best_spread:
            best, best_spread = c, spread
    return idx == best


def extract_features(img: np.ndarray) -> np.ndarray:
    """Fixed-length descriptor: color, texture, and mask-geometry blocks."""
    h, w = img.shape[:2]
    n = h * w
    feats = []

    # Color histogram, 4 bins per channel.
    idx = _quantize_index(img)
    feats.append(np.bincount(idx.ravel(), minlength=_QBINS**3) / n)

    # Gradient-orientation histogram on grayscale (texture signal).
    gray = img.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    obins = np.clip((ang / np.pi * 8).astype(np.int64), 0, 7)
    ohist = np.bincount(obins.ravel(), weights=mag.ravel(), minlength=8)
    feats.append(ohist / (mag.sum() + 1e-9))
    feats.append([mag.mean(), mag.std()])

    # Patch-variance statistics (4x4 patches).
    p = gray.reshape(h // 4, 4, w // 4, 4).transpose(0, 2, 1, 3).reshape(-1, 16)
    pv = p.var(axis=1)
    feats.append([pv.mean(), pv.std(), pv.min(), pv.max(), np.median(pv), (pv > 0.01).mean()])

    # Geometry of the foreground mask.
    fg = _foreground_mask(img)
    area = fg.sum()
    yy, xx = np.mgrid[0:h, 0:w]
    if area == 0:
        feats.append(np.zeros(23))
    else:
        ys, xs = yy[fg].astype(np.float64), xx[fg].astype(np.float64)
        cy, cx = ys.mean(), xs.mean()
        dy, dx = ys - cy, xs - cx
        rr = np.hypot(dx, dy)
        rmax = rr.max() + 1e-9
        radial = np.histogram(rr / rmax, bins=4, range=(0, 1))[0] / area
        # Occupancy of the central disk exposes holes (ring vs circle).
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= (0.45 * rmax) ** 2
        hole = 1.0 - (fg & disk).sum() / max(disk.sum(), 1)
        vskew = float(((dy / rmax) ** 3).mean())
        hskew = float(((dx / rmax) ** 3).mean())
        # Orientation histogram of the mask boundary: style-free shape signal.
        fgf = fg.astype(np.float64)
        by, bx = np.gradient(fgf)
        bmag = np.hypot(bx, by)
        bang = np.mod(np.arctan2(by, bx), np.pi)
        bbins = np.clip((bang / np.pi * 8).astype(np.int64), 0, 7)
        bhist = np.bincount(bbins.ravel(), weights=bmag.ravel(), minlength=8)
        bhist = bhist / (bmag.sum() + 1e-9)
        ah, aw = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
        feats.append(
            np.concatenate(
                [
                    [area / n, (cx - w / 2) / w, (cy - h / 2) / h],
                    [dx.var() / (rmax**2), dy.var() / (rmax**2), (dx * dy).mean() / (rmax**2)],
                    radial,
                    [hole, vskew, hskew],
                    bhist,
                    [ah / aw if aw > 0 else 0.0, area / (ah * aw)],
                ]
            )
        )
    return np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in feats])


FEATURE_DIM = extract_features(np.zeros((IMG_SIZE, IMG_SIZE, 3))).shape[0]


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


class OracleGateError(RuntimeError):
    """Raised when an oracle misses its held-out accuracy gate."""


@dataclass
class SoftmaxClassifier:
    """Multinomial logistic regression, full-batch, deterministic."""

    weights: np.ndarray = field(default=None, repr=False)
    bias: np.ndarray = field(default=None, repr=False)
    mean: np.ndarray = field(default=None, repr=False)
    std: np.ndarray = field(default=None, repr=False)

    def fit(self, X, y, n_classes, steps=400, lr=0.5, l2=1e-4, seed=0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.mean = X.mean(axis=0)
        self.std = X.std(axis=0) + 1e-9
        Z = (X - self.mean) / self.std
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, 0.01, size=(Z.shape[1], n_classes))
        b = np.zeros(n_classes)
        onehot = np.eye(n_classes)[y]
        n = Z.shape[0]
        for _ in range(steps):
            logits = Z @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            gW = Z.T @ (p - onehot) / n + l2 * W
            gb = (p - onehot).mean(axis=0)
            W -= lr * gW
            b -= lr * gb
        self.weights, self.bias = W, b
        return self

    def predict_proba(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        logits = Z @ self.weights + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


@dataclass
class OraclePair:
    style_clf: SoftmaxClassifier
    content_clf: SoftmaxClassifier
    style_accuracy: float
    content_accuracy: float

    def classify_style(self, images) -> np.ndarray:
        return self.style_clf.predict([extract_features(im) for im in images])

    def classify_content(self, images) -> np.ndarray:
        return self.content_clf.predict([extract_features(im) for im in images])


ORACLE_GATE = 0.95
MIN_PER_CLASS = 10


def train_oracles(
    examples: list[LabeledExample],
    seed: int = 0,
    holdout_frac: float = 0.25,
    augment: list[LabeledExample] | None = None,
) -> OraclePair:
    """Fit style and content classifiers; refuse to return weak oracles.

    `augment` examples (e.g. codebook reconstructions of the originals) join
    the training split only, widening the image distribution the oracles
    recognize; the held-out accuracy gate is always measured on `examples`.
    """
    styles = np.array([e.style_id for e in examples])
    contents = np.array([e.content_id for e in examples])
    for name, labels in (("style", styles), ("content", contents)):
        _, counts = np.unique(labels, return_counts=True)
        if counts.min() < MIN_PER_CLASS:
            raise ValueError(f"need at least {MIN_PER_CLASS} examples per {name} class")
    X = np.stack([extract_features(e.image) for e in examples])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    n_hold = max(1, int(len(examples) * holdout_frac))
    hold, train = order[:n_hold], order[n_hold:]

    extra = list(augment) if augment else []
    X_extra = np.stack([extract_features(e.image) for e in extra]) if extra else None
    X_train = np.concatenate([X[train], X_extra]) if extra else X[train]

    accs = {}
    clfs = {}
    for name, labels, get in (
        ("style", styles, lambda e: e.style_id),
        ("content", contents, lambda e: e.content_id),
    ):
        n_classes = int(labels.max()) + 1
        y_train = labels[train]
        if extra:
            y_train = np.concatenate([y_train, np.array([get(e) for e in extra])])
        clf = SoftmaxClassifier().fit(X_train, y_train, n_classes, seed=seed)
        accs[name] = float((clf.predict(X[hold]) == labels[hold]).mean())
        if accs[name] < ORACLE_GATE:
            raise OracleGateError(
                f"{name} oracle held-out accuracy {accs[name]:.3f} below gate {ORACLE_GATE}"
            )
        clfs[name] = clf
    return OraclePair(clfs["style"], clfs["content"], accs["style"], accs["content"])
