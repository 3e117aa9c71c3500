"""The palette network: per-pixel soft assignment of each channel to K color
buckets, palette construction by masked averaging, color-condensed
reconstruction, and the three bucket-utilization losses.

Probability maps are Tensors shaped (..., C, H, W, K) with a softmax over the
last axis. Hard operations (argmax assignment, bucket means, lookup) live in
plain numpy; the soft counterparts are differentiable, and training couples
them with a straight-through node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError
from .nn.tensor import (
    Tensor, as_tensor, conv2d, matmul, mul, relu, reshape, softmax,
    straight_through, tmax, tmean, transpose, tsum, xlogx,
)
from .quantize import QuantizedImage

SOFT_EPS = 1e-8


@dataclass
class PaletteNetParams:
    """Two 1x1 convolutions with a ReLU between; the second has no bias."""

    w1: np.ndarray  # (hidden, C, 1, 1)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (C*K, hidden, 1, 1)
    k: int
    tau: float = 1.0

    @property
    def channels(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @classmethod
    def random(cls, channels, k, hidden=64, tau=1.0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        w1 = (rng.standard_normal((hidden, channels, 1, 1)) * np.sqrt(2.0 / channels)).astype(dtype)
        b1 = np.zeros(hidden, dtype=dtype)
        w2 = (rng.standard_normal((channels * k, hidden, 1, 1)) * np.sqrt(1.0 / hidden)).astype(dtype)
        return cls(w1=w1, b1=b1, w2=w2, k=k, tau=float(tau))

    def flat(self):
        return {"layer1.w": self.w1, "layer1.b": self.b1, "layer2.w": self.w2}

    def with_flat(self, flat):
        return PaletteNetParams(w1=flat["layer1.w"], b1=flat["layer1.b"],
                                w2=flat["layer2.w"], k=self.k, tau=self.tau)

    def tensors(self, requires_grad=True):
        flat = {k: Tensor(v, requires_grad=requires_grad) for k, v in self.flat().items()}
        return self.with_flat(flat), flat


def forward_prob_map(params, image):
    """Image (C,H,W) or (N,C,H,W) floats -> probability map (...,C,H,W,K)."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) image, got {image.shape}")
    c = params.channels
    if x.data.shape[1] != c:
        raise ConfigError(f"image has {x.data.shape[1]} channels, palette network expects {c}")
    n, _, h, w = x.data.shape
    hid = relu(conv2d(x, params.w1, params.b1))
    logits = conv2d(hid, params.w2)                    # (N, C*K, H, W)
    k = params.k
    logits = reshape(logits, (n, c, k, h, w))
    logits = transpose(logits, (0, 1, 3, 4, 2))        # (N, C, H, W, K)
    m = softmax(mul(logits, 1.0 / params.tau), axis=-1)
    return reshape(m, (c, h, w, k)) if single else m


def hard_assignments(m):
    """Argmax bucket per (channel, pixel); ties go to the lowest bucket."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    return data.argmax(axis=-1)


def soft_palette(image, m):
    """Differentiable palette: bucket-probability-weighted pixel means (...C,K)."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    m = as_tensor(m)
    num = tsum(mul(reshape(x, x.data.shape + (1,)), m), axis=(-3, -2))
    den = tsum(m, axis=(-3, -2)) + SOFT_EPS
    return num / den


def hard_palette(image, m):
    """Bucket means over argmax assignments; empty buckets take the soft value."""
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    md = m.data if isinstance(m, Tensor) else np.asarray(m)
    if md.shape[:-1] != x.shape:
        raise ShapeError(f"map {md.shape} does not cover image {x.shape}")
    k = md.shape[-1]
    idx = md.argmax(axis=-1)
    onehot = np.zeros(md.shape, dtype=x.dtype)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    counts = onehot.sum(axis=(-3, -2))
    sums = (x[..., None] * onehot).sum(axis=(-3, -2))
    soft = soft_palette(Tensor(x), Tensor(md)).data
    out = np.where(counts > 0, sums / np.maximum(counts, 1.0), soft)
    return out


def reconstruct(image, m, mode="hard"):
    """Color-condensed image: palette lookup (hard), probability mixing (soft),
    or hard values with the soft gradient path (ste, used in training)."""
    if mode == "hard":
        x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        md = m.data if isinstance(m, Tensor) else np.asarray(m)
        return _lookup(hard_palette(x, md), md.argmax(axis=-1))
    if mode == "soft":
        return _soft_recon(image, m)
    if mode == "ste":
        hard = reconstruct(image, m, "hard")
        soft = _soft_recon(image, m)
        return straight_through(hard.astype(soft.data.dtype), soft)
    raise ParameterError(f"unknown reconstruction mode {mode!r}")


def _lookup(palette, idx):
    """palette (..., C, K) gathered at idx (..., C, H, W)."""
    flat_idx = idx.reshape(idx.shape[:-2] + (-1,))
    out = np.take_along_axis(palette, flat_idx, axis=-1)
    return out.reshape(idx.shape)


def _soft_recon(image, m):
    m = as_tensor(m)
    pal = soft_palette(image, m)                       # (..., C, K)
    pal_exp = reshape(pal, pal.data.shape[:-1] + (1, 1) + pal.data.shape[-1:])
    return tsum(mul(pal_exp, m), axis=-1)


def palette_result(image, m):
    """Palette, argmax assignments and hard reconstruction in one bundle."""
    pal = hard_palette(image, m)
    idx = hard_assignments(m)
    return pal, idx, _lookup(pal, idx)


# ---------------------------------------------------------------------------
# losses

def loss_max_color(m):
    """Mean over channels/buckets of the best per-pixel confidence, negated.

    Minimizing pushes every bucket to own at least one confident pixel.
    Lies in [-1, 0).
    """
    m = as_tensor(m)
    mx = tmax(tmax(m, axis=-3), axis=-2)   # over H then W -> (..., C, K)
    return -tmean(mx)


def loss_balance(m):
    """Negative entropy of the per-bucket pixel mass.

    The spatial mean of a probability map is already a distribution over
    buckets; its x*log(x) sum (natural log, 0 log 0 := 0) is averaged over
    channels and buckets. Lies in [-(ln K)/K, 0].
    """
    m = as_tensor(m)
    p = tmean(m, axis=(-3, -2))            # (..., C, K)
    return tmean(xlogx(p))


def _reference_indices(reference, k):
    if isinstance(reference, QuantizedImage):
        if reference.k != k:
            raise ConfigError(f"reference uses K={reference.k}, map uses K={k}")
        return reference.indices
    ref = np.asarray(reference)
    if ref.max() >= k:
        raise ConfigError(f"reference index {ref.max()} out of range for K={k}")
    return ref


def loss_align(m, reference, k=None):
    """Co-assignment alignment with a reference clustering, label-order free.

    For pixel-bucket matrices M (soft, from the map) and H (one-hot reference)
    the penalty is ||M M^T - H H^T||^2 / P^2 per channel, averaged over
    channels and images; expanded to Gram matrices so nothing P x P is ever
    built. Gradients flow through M only.
    """
    m = as_tensor(m)
    kk = m.data.shape[-1]
    if k is not None and k != kk:
        raise ConfigError(f"expected K={k}, map has K={kk}")
    ref = _reference_indices(reference, kk)
    single = m.data.ndim == 4
    md = reshape(m, (1,) + m.data.shape) if single else m
    ref = ref[None] if single else ref
    n, c, h, w, _ = md.data.shape
    if ref.shape != (n, c, h, w):
        raise ShapeError(f"reference {ref.shape} does not match map {(n, c, h, w)}")
    p = h * w
    mm = reshape(md, (n * c, p, kk))
    gram = matmul(transpose(mm, (0, 2, 1)), mm)               # (B, K, K)
    onehot = np.zeros((n * c, p, kk), dtype=md.data.dtype)
    np.put_along_axis(onehot, ref.reshape(n * c, p, 1), 1.0, axis=-1)
    cross = matmul(Tensor(np.ascontiguousarray(onehot.transpose(0, 2, 1))), mm)  # (B, K, K)
    counts = onehot.sum(axis=1)
    const = float((counts ** 2).sum())
    total = tsum(gram * gram) - 2.0 * tsum(cross * cross) + const
    return total / float(n * c * p * p)


def palette_total_loss(task_loss, m, reference, alpha=1.0, beta=1.0, gamma=3.0):
    """task + alpha * max-color + beta * balance + gamma * alignment."""
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ParameterError("loss coefficients must be non-negative")
    total = as_tensor(task_loss)
    if alpha:
        total = total + alpha * loss_max_color(m)
    if beta:
        total = total + beta * loss_balance(m)
    if gamma:
        total = total + gamma * loss_align(m, reference)
    return total


def active_buckets(m):
    """Mean over (image, channel) of how many buckets win at least one pixel."""
    idx = hard_assignments(m)
    flat = idx.reshape(-1, idx.shape[-2] * idx.shape[-1])
    return float(np.mean([np.unique(row).size for row in flat]))


def validate_prob_map(m, atol=1e-6):
    """Check the probability-map invariants: entries in [0,1], rows sum to 1."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    if data.min() < -atol or data.max() > 1 + atol:
        raise ShapeError("probability map entries outside [0, 1]")
    sums = data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > atol:
        raise ShapeError("probability map rows do not sum to 1")
    return True
