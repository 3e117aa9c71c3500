"""Classical color quantizers used as baselines, as the approximation of the
palette network during initialization, and as the clustering reference for
the alignment loss.

Both quantizers are deterministic: greedy Median Cut box splitting (most
populated box first, longest value axis, pixel-count median moved to the
nearest value boundary) and bottom-up OCTree leaf folding (deepest level
first, fewest pixels first, path order on ties). Bucket colors are member
means rounded half-up to 8 bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

PER_CHANNEL = "per_channel"
JOINT = "joint"


@dataclass
class QuantizedImage:
    palette: np.ndarray  # uint8; per_channel: (C, K); joint: (K, C)
    indices: np.ndarray  # per_channel: (C, H, W); joint: (H, W)
    k: int
    mode: str

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.uint8)
        self.indices = np.asarray(self.indices)
        if self.mode not in (PER_CHANNEL, JOINT):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.indices.min() < 0 or self.indices.max() >= self.k:
            raise ShapeError(f"indices must lie in [0, {self.k})")

    @property
    def channels(self):
        return self.palette.shape[0] if self.mode == PER_CHANNEL else self.palette.shape[1]

    @property
    def hw(self):
        return self.indices.shape[-2:]

    def reconstruct(self):
        """Palette lookup back to a (C, H, W) uint8 image."""
        if self.mode == PER_CHANNEL:
            return np.stack([self.palette[c][self.indices[c]] for c in range(self.channels)])
        return np.ascontiguousarray(self.palette[self.indices].transpose(2, 0, 1))


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.uint8)


def _split_point(values_sorted):
    """Pixel-count median moved to the nearest value boundary.

    Guarantees both sides are non-empty and no value runs across the cut,
    so colors are never torn apart and u <= K inputs quantize losslessly.
    """
    n = len(values_sorted)
    m = n // 2
    if values_sorted[m - 1] != values_sorted[m]:
        return m
    run = values_sorted[m]
    a = int(np.searchsorted(values_sorted, run, side="left"))
    b = int(np.searchsorted(values_sorted, run, side="right"))
    options = [o for o in (a, b) if 0 < o < n]
    return min(options, key=lambda o: (abs(o - m), o))


def _median_cut_boxes(pixels, k):
    """Greedy box splitting on (P, C) integer pixels; returns list of index arrays."""
    boxes = [np.arange(pixels.shape[0])]
    spans = [pixels[boxes[0]].max(axis=0).astype(np.int64) - pixels[boxes[0]].min(axis=0)]
    while len(boxes) < k:
        best = -1
        for i, (box, span) in enumerate(zip(boxes, spans)):
            if span.max() > 0 and (best < 0 or len(box) > len(boxes[best])):
                best = i
        if best < 0:
            break
        box, span = boxes[best], spans[best]
        axis = int(np.argmax(span))  # argmax ties -> lowest axis index
        vals = pixels[box, axis]
        order = np.argsort(vals, kind="stable")
        cut = _split_point(vals[order])
        left, right = box[order[:cut]], box[order[cut:]]
        boxes[best] = left
        boxes.append(right)
        for i, b in ((best, left), (len(boxes) - 1, right)):
            px = pixels[b]
            if i < len(spans):
                spans[i] = px.max(axis=0).astype(np.int64) - px.min(axis=0)
            else:
                spans.append(px.max(axis=0).astype(np.int64) - px.min(axis=0))
    return boxes


def _median_cut_1d(values, k):
    """Specialized per-channel cut over the 256-bin value histogram.

    Same greedy rule as _median_cut_boxes: since 1-d splits always land on
    value boundaries, boxes are value ranges and the histogram domain gives
    an identical partition without per-pixel sorting.

    Returns (palette_float_means, flat_indices).
    """
    hist = np.bincount(values, minlength=256).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(hist)])           # pixels with value < v
    wsum = np.concatenate([[0], np.cumsum(hist * np.arange(256))])
    present = np.flatnonzero(hist)
    plo = np.searchsorted(present, np.arange(257))          # present values below v

    def n_distinct(lo, hi):
        return int(plo[hi] - plo[lo])

    boxes = [(0, 256)]  # half-open value ranges
    counts = [int(csum[256])]
    multi = [n_distinct(0, 256) > 1]
    while len(boxes) < k:
        best = -1
        for i in range(len(boxes)):
            if multi[i] and (best < 0 or counts[i] > counts[best]):
                best = i
        if best < 0:
            break
        lo, hi = boxes[best]
        n = counts[best]
        m = n // 2
        # x = value at sorted position m (0-based) within this box
        x = int(np.searchsorted(csum[lo + 1:hi + 1], csum[lo] + m + 1)) + lo
        a = int(csum[x] - csum[lo])       # pixels before x's run
        b = int(csum[x + 1] - csum[lo])   # pixels through x's run
        cut = min((o for o in (a, b) if 0 < o < n), key=lambda o: (abs(o - m), o))
        split_v = x if cut == a else x + 1
        boxes[best] = (lo, split_v)
        counts[best] = cut
        multi[best] = n_distinct(lo, split_v) > 1
        boxes.append((split_v, hi))
        counts.append(n - cut)
        multi.append(n_distinct(split_v, hi) > 1)

    means = np.zeros(k, dtype=np.float64)
    lut = np.zeros(256, dtype=np.int64)
    for i, (lo, hi) in enumerate(boxes):
        means[i] = (wsum[hi] - wsum[lo]) / (csum[hi] - csum[lo])
        lut[lo:hi] = i
    if len(boxes) < k:
        means[len(boxes):] = means[len(boxes) - 1]
    return means, lut[values]


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        raise ShapeError(f"expected uint8 image, got {image.dtype}")
    return image


def median_cut(image, k, mode=JOINT):
    """Quantize to at most k colors (joint RGB boxes) or k values per channel."""
    image = _check_image(image)
    c, h, w = image.shape
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > h * w:
        raise ParameterError(f"k={k} exceeds pixel count {h * w}")
    if mode == JOINT:
        pixels = image.reshape(c, h * w).T.astype(np.int64)
        boxes = _median_cut_boxes(pixels, k)
        palette = np.zeros((k, c), dtype=np.uint8)
        indices = np.zeros(h * w, dtype=np.int64)
        for b, box in enumerate(boxes):
            palette[b] = _round_half_up(pixels[box].mean(axis=0))
            indices[box] = b
        palette[len(boxes):] = palette[len(boxes) - 1]  # pad: repeat last mean
        return QuantizedImage(palette, indices.reshape(h, w), k, JOINT)
    if mode != PER_CHANNEL:
        raise ParameterError(f"unknown mode {mode!r}")
    palette = np.zeros((c, k), dtype=np.uint8)
    indices = np.zeros((c, h * w), dtype=np.int64)
    for ch in range(c):
        means, idx = _median_cut_1d(image[ch].reshape(-1), k)
        palette[ch] = _round_half_up(means)
        indices[ch] = idx
    return QuantizedImage(palette, indices.reshape(c, h, w), k, PER_CHANNEL)


def median_cut_indices(image, k):
    """Per-channel Median Cut bucket assignments only ((C, H, W) ints)."""
    return median_cut(image, k, mode=PER_CHANNEL).indices


# ---------------------------------------------------------------------------
# OCTree

def _octree_path(colors):
    """Interleaved-bit branch index (0..7) per depth 1..8 for (U, 3) colors."""
    r, g, b = colors[:, 0], colors[:, 1], colors[:, 2]
    paths = np.zeros((colors.shape[0], 9), dtype=np.int64)
    for depth in range(1, 9):
        shift = 8 - depth
        branch = (((r >> shift) & 1) << 2) | (((g >> shift) & 1) << 1) | ((b >> shift) & 1)
        paths[:, depth] = (paths[:, depth - 1] << 3) | branch
    return paths


def octree_quantize(image, k):
    """Joint-RGB octree quantization: insert at depth 8, fold leaves bottom-up
    (deepest level first, fewest pixels first) until at most k leaves remain."""
    image = _check_image(image)
    if image.shape[0] != 3:
        raise ShapeError("octree quantization needs an RGB image")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    c, h, w = image.shape
    pixels = image.reshape(3, -1).T
    colors, inverse, counts = np.unique(pixels, axis=0, return_inverse=True, return_counts=True)
    paths = _octree_path(colors)

    # leaves[(depth, prefix)] = [pixel_count, sum_r, sum_g, sum_b]
    leaves = {}
    for u in range(colors.shape[0]):
        key = (8, int(paths[u, 8]))
        entry = leaves.setdefault(key, [0, 0.0, 0.0, 0.0])
        entry[0] += int(counts[u])
        for ch in range(3):
            entry[1 + ch] += float(colors[u, ch]) * counts[u]

    for depth in range(8, 0, -1):
        if len(leaves) <= k:
            break
        parents = {}
        for (d, prefix), entry in leaves.items():
            if d == depth:
                parents.setdefault(prefix >> 3, []).append((prefix, entry))
        order = sorted(parents.items(), key=lambda kv: (sum(e[0] for _, e in kv[1]), kv[0]))
        for prefix, children in order:
            if len(leaves) <= k:
                break
            merged = [0, 0.0, 0.0, 0.0]
            for child_prefix, entry in children:
                del leaves[(depth, child_prefix)]
                for j in range(4):
                    merged[j] += entry[j]
            leaves[(depth - 1, prefix)] = merged

    # stable bucket ids: order leaves by their left-aligned path value
    keys = sorted(leaves, key=lambda key: (key[1] << (3 * (8 - key[0])), key[0]))
    bucket_of = {key: i for i, key in enumerate(keys)}
    palette = np.zeros((k, 3), dtype=np.uint8)
    for key, i in bucket_of.items():
        cnt, *sums = leaves[key]
        palette[i] = _round_half_up(np.array(sums) / cnt)
    if len(keys) < k:
        palette[len(keys):] = palette[len(keys) - 1]

    color_bucket = np.empty(colors.shape[0], dtype=np.int64)
    for u in range(colors.shape[0]):
        for depth in range(8, -1, -1):
            key = (depth, int(paths[u, depth]))
            if key in bucket_of:
                color_bucket[u] = bucket_of[key]
                break
    indices = color_bucket[inverse].reshape(h, w)
    return QuantizedImage(palette, indices, k, JOINT)


# ---------------------------------------------------------------------------
# metrics

def quantization_mse(original, quantized):
    """Mean squared pixel error on unit scale between an image and its quantization."""
    original = np.asarray(original)
    recon = quantized.reconstruct() if isinstance(quantized, QuantizedImage) else np.asarray(quantized)
    if original.shape != recon.shape:
        raise ShapeError(f"shape mismatch: {original.shape} vs {recon.shape}")
    a = original.astype(np.float64) / 255.0
    b = recon.astype(np.float64) / 255.0
    return float(np.mean((a - b) ** 2))


def unique_colors(image):
    """Exact number of distinct colors (joint across channels)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {image.shape}")
    return int(np.unique(image.reshape(image.shape[0], -1).T, axis=0).shape[0])


def unique_channel_values(image):
    """Distinct value count per channel."""
    image = np.asarray(image)
    return [int(np.unique(image[ch]).size) for ch in range(image.shape[0])]
