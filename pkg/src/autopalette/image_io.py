"""Dataset ingestion and preprocessing.

Covers the CIFAR-10 binary format (byte-exact both directions), binary PPM
(P6, maxval 255), ZCA whitening, and a seeded procedural dataset generator
used when no real CIFAR-10 download is available.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.images.shape[0] == 0:
            raise ShapeError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ShapeError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    def class_indices(self):
        """List of index arrays, one per class, in dataset order."""
        return [np.flatnonzero(self.labels == c) for c in range(self.class_count)]

    def subset(self, indices):
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format

def _load_cifar_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise FormatError(f"{path}: truncated CIFAR file, {raw.size} bytes is not a "
                          f"multiple of {CIFAR_RECORD}", offset=(raw.size // CIFAR_RECORD) * CIFAR_RECORD)
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range",
                          offset=int(bad[0]) * CIFAR_RECORD)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels.astype(np.int64)


def _cifar_files(root, split):
    root = Path(root)
    if root.is_file():
        return [root]
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    for base in (root, root / "cifar-10-batches-bin"):
        paths = [base / n for n in names]
        if all(p.is_file() for p in paths):
            return paths
    raise FileNotFoundError(f"no CIFAR-10 {split} files under {root}")


def load_cifar10(path, split="train"):
    """Load CIFAR-10 binary batches from a directory (or one .bin file)."""
    parts = [_load_cifar_file(p) for p in _cifar_files(path, split)]
    images = np.concatenate([p[0] for p in parts], axis=0)
    labels = np.concatenate([p[1] for p in parts], axis=0)
    return LabeledDataset(images, labels, class_count=10)


def save_cifar10(dataset, path):
    """Serialize a dataset to one CIFAR-10 format binary file (inverse of the loader)."""
    n = len(dataset)
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ShapeError(f"CIFAR format requires 3x32x32 images, got {dataset.images.shape[1:]}")
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = dataset.images.reshape(n, 3072)
    out.tofile(path)


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

def _next_token(buf, pos):
    """Skip whitespace and '#' comments, return (token, new_pos)."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PPM header", offset=pos)
    return buf[start:pos], pos


def read_ppm(path):
    """Read a binary P6 PPM into a (3, H, W) uint8 array."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM (magic {buf[:2]!r})", offset=0)
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: bad header token {tok!r}", offset=pos) from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, need 255", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: pixel data truncated ({len(data)} of {need} bytes)",
                          offset=pos + len(data))
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_ppm(image, path):
    """Write a (3, H, W) uint8 array as a canonical-header binary P6 PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"PPM needs a (3, H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        raise ShapeError(f"PPM needs uint8 pixels, got {image.dtype}")
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# ZCA whitening

@dataclass
class ZcaTransform:
    mean: np.ndarray     # (D,)
    matrix: np.ndarray   # (D, D), symmetric whitening matrix
    eps: float
    _inverse: np.ndarray = field(default=None, repr=False, compare=False)

    def inverse_matrix(self):
        if self._inverse is None:
            # matrix = E diag((l+eps)^-1/2) E^T, so inverting the eigenvalues
            # of the whitening matrix recovers the unwhitening map
            vals, vecs = np.linalg.eigh(self.matrix)
            self._inverse = (vecs * (1.0 / vals)) @ vecs.T
        return self._inverse


def _as_unit_float(images):
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0
    return images.astype(np.float64, copy=False)


def zca_fit(images, eps=0.1):
    """Fit a ZCA whitening transform on (N, ...) images (uint8 or unit floats)."""
    x = _as_unit_float(images).reshape(len(images), -1)
    if eps <= 0:
        raise NumericError("ZCA regularizer must be positive")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-8 * max(1.0, abs(vals.max())):
        raise NumericError(f"covariance not PSD after symmetrization (min eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    matrix = (vecs * (1.0 / np.sqrt(vals + eps))) @ vecs.T
    return ZcaTransform(mean=mean, matrix=matrix, eps=float(eps))


def zca_apply(transform, images):
    """Whiten images; returns float64 arrays shaped like the input."""
    x = _as_unit_float(images)
    shape = x.shape
    flat = x.reshape(shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    out = (flat - transform.mean) @ transform.matrix
    return out.reshape(shape)


def zca_invert(transform, whitened):
    """Undo zca_apply (exact up to floating point for eps > 0)."""
    x = np.asarray(whitened, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    out = flat @ transform.inverse_matrix() + transform.mean
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# procedural stand-in dataset (CIFAR-shaped, fully seeded)

def _smooth_field(rng, hw, scale=3):
    """Low-frequency random surface in [-1, 1] from outer products of smooth curves."""
    h, w = hw
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    out = np.zeros((h, w))
    for p in range(1, scale + 1):
        amp = rng.normal() / p
        phase_y, phase_x = rng.uniform(0, 2 * np.pi, 2)
        out += amp * np.cos(np.pi * p * ys + phase_y) * np.cos(np.pi * p * xs + phase_x)
    m = np.abs(out).max()
    return out / m if m > 0 else out


def _shape_mask(rng, kind, hw):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    cy = rng.uniform(0.30, 0.70) * h
    cx = rng.uniform(0.30, 0.70) * w
    r = rng.uniform(0.18, 0.36) * min(h, w)
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if kind == "disk":
        return (u * u + v * v) <= r * r
    if kind == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if kind == "triangle":
        return (v >= -r) & (v + 2 * np.abs(u) <= r)
    if kind == "stripes":
        period = max(3.0, r / 1.5)
        return (np.mod(u, period) < period / 2) & (np.abs(v) <= 1.4 * r)
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


_SHAPES = ["disk", "square", "triangle", "stripes", "ring"]


def make_procedural_dataset(n_per_class, class_count=10, hw=(32, 32), seed=0):
    """Deterministic CIFAR-shaped dataset of textured shapes on gradient backgrounds.

    Classes i and i + class_count//2 share a shape family and differ mainly in
    color, so part of the label signal lives in color structure; the rest in
    geometry. Per-image jitter covers position, scale, palette, background
    style, and illumination, giving each class several appearance modes.
    """
    master = np.random.default_rng(seed)
    # fixed per-class palettes: foreground/background anchor colors
    fg_anchor = master.uniform(70, 230, size=(class_count, 3))
    bg_anchor = master.uniform(40, 200, size=(class_count, 3))
    half = class_count // 2
    h, w = hw
    images = np.empty((class_count * n_per_class, 3, h, w), dtype=np.uint8)
    labels = np.empty(class_count * n_per_class, dtype=np.int64)
    idx = 0
    for c in range(class_count):
        rng = np.random.default_rng(master.integers(2 ** 63))
        shape_kind = _SHAPES[(c % half) % len(_SHAPES)]
        for _ in range(n_per_class):
            fg = np.clip(fg_anchor[c] + rng.normal(0, 22, 3), 0, 255)
            bg = np.clip(bg_anchor[c] + rng.normal(0, 22, 3), 0, 255)
            ramp = _smooth_field(rng, hw, scale=2)
            texture = _smooth_field(rng, hw, scale=3)
            mask = _shape_mask(rng, shape_kind, hw)
            shading = _smooth_field(rng, hw, scale=1)
            img = np.empty((3, h, w))
            for ch in range(3):
                back = bg[ch] + 38.0 * ramp + 18.0 * texture * rng.uniform(0.5, 1.5)
                front = fg[ch] + 30.0 * shading
                img[ch] = np.where(mask, front, back)
            img *= rng.uniform(0.82, 1.12)  # illumination
            img += rng.normal(0, 4.0, size=img.shape)  # sensor-ish noise
            images[idx] = np.clip(img, 0, 255).astype(np.uint8)
            labels[idx] = c
            idx += 1
    order = np.random.default_rng(seed + 1).permutation(idx)
    return LabeledDataset(images[order], labels[order], class_count)


def ensure_dataset(data_dir, train_per_class, test_total, seed=0):
    """Desk-scale dataset: real CIFAR-10 when available under `data_dir`,
    otherwise a procedural stand-in written in the CIFAR binary format.

    Returns (train: LabeledDataset, test: LabeledDataset, source: str).
    """
    data_dir = Path(data_dir) if data_dir else None
    if data_dir is not None:
        try:
            train = load_cifar10(data_dir, "train")
            test = load_cifar10(data_dir, "test")
            rng = np.random.default_rng(seed)
            keep = []
            for idxs in train.class_indices():
                keep.append(rng.permutation(idxs)[:train_per_class])
            train = train.subset(np.sort(np.concatenate(keep)))
            test = test.subset(np.sort(np.random.default_rng(seed + 1).permutation(len(test))[:test_total]))
            return train, test, "cifar10"
        except FileNotFoundError:
            pass
    cache = data_dir / f"procgen_{train_per_class}_{test_total}_{seed}" if data_dir else None
    if cache is not None and (cache / "train.bin").is_file() and (cache / "test.bin").is_file():
        return (load_cifar10(cache / "train.bin"), load_cifar10(cache / "test.bin"), "procedural")
    classes = 10
    train = make_procedural_dataset(train_per_class, classes, seed=seed)
    test = make_procedural_dataset(max(1, test_total // classes), classes, seed=seed + 77)
    test = test.subset(np.arange(test_total))
    if cache is not None:
        os.makedirs(cache, exist_ok=True)
        save_cifar10(train, cache / "train.bin")
        save_cifar10(test, cache / "test.bin")
    return train, test, "procedural"
