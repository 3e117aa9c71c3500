"""Diversity-guided initialization: rank one class's images by the conditional
gain of a generalized graph cut over cosine similarities of last-layer
gradients, computed on color-quantized copies of the images.

The scoring network is a freshly seeded random ConvNet; the last-layer
gradient of the cross-entropy loss has the closed form
(softmax(logits) - onehot(label)) x penultimate_features, so no autodiff
runs here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from .nn.convnet import forward_convnet

ZERO_NORM_TOL = 1e-30


@dataclass
class SimilarityKernel:
    matrix: np.ndarray      # (N, N) cosine similarities
    universe: np.ndarray    # dataset indices behind each row

    def __len__(self):
        return self.matrix.shape[0]


@dataclass
class SelectionConfig:
    ipc: int
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.ipc < 1:
            raise ParameterError(f"ipc must be >= 1, got {self.ipc}")
        if self.lam <= 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")


def gradient_feature(net, image, label):
    """Flattened d(cross-entropy)/d(classifier weights) for one image."""
    label = int(label)
    if not 0 <= label < net.num_classes:
        raise ParameterError(f"label {label} out of range for {net.num_classes} classes")
    img = np.asarray(image, dtype=np.float64)
    feats = forward_convnet(net, img[None]).data
    logits = (feats @ net.fc_w + net.fc_b)[0]
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    p[label] -= 1.0
    return np.outer(feats[0], p).reshape(-1)


def gradient_features(net, images, labels, batch=256):
    """Vectorized gradient_feature over a stack of images."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for lo in range(0, len(images), batch):
        feats = forward_convnet(net, images[lo:lo + batch]).data
        logits = feats @ net.fc_w + net.fc_b
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(len(p)), labels[lo:lo + batch]] -= 1.0
        out.append(np.einsum("nf,nc->nfc", feats, p).reshape(len(p), -1))
    return np.concatenate(out, axis=0)


def similarity_kernel(features, universe=None):
    """Pairwise cosine similarities; zero vectors score 0 against everything
    else and 1 with themselves (the diagonal is one by definition)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"expected (N, D) features, got {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    safe = np.where(norms > ZERO_NORM_TOL, norms, 1.0)
    unit = f / safe[:, None]
    mat = unit @ unit.T
    dead = norms <= ZERO_NORM_TOL
    if dead.any():
        mat[dead, :] = 0.0
        mat[:, dead] = 0.0
    np.fill_diagonal(mat, 1.0)
    mat = np.clip(0.5 * (mat + mat.T), -1.0, 1.0)
    if universe is None:
        universe = np.arange(f.shape[0])
    return SimilarityKernel(matrix=mat, universe=np.asarray(universe))


def graph_cut_value(kernel, subset, lam=1.0):
    """f(A) = lam * sum_{i in U} sum_{a in A} Sim(i,a) - sum_{a1,a2 in A} Sim(a1,a2)."""
    subset = np.asarray(list(subset), dtype=np.int64)
    if subset.size == 0:
        return 0.0
    n = len(kernel)
    if subset.min() < 0 or subset.max() >= n:
        raise ParameterError(f"subset indices outside the {n}-element universe")
    cover = kernel.matrix[:, subset].sum()
    intra = kernel.matrix[np.ix_(subset, subset)].sum()
    return float(lam * cover - intra)


def conditional_gain(kernel, candidate, selected, lam=1.0):
    """f(A + {c}) - f(A), using the closed form
    lam * sum_i Sim(i,c) - Sim(c,c) - 2 * sum_{a in A} Sim(c,a)."""
    selected = np.asarray(list(selected), dtype=np.int64)
    if candidate in selected:
        raise ContractError(f"candidate {candidate} is already selected")
    row = kernel.matrix[candidate]
    penalty = 2.0 * row[selected].sum() if selected.size else 0.0
    return float(lam * row.sum() - kernel.matrix[candidate, candidate] - penalty)


def greedy_select(kernel, config):
    """Seeded greedy maximization of the conditional gain; returns dataset
    indices (kernel universe order) of the ipc chosen images."""
    n = len(kernel)
    if config.ipc > n:
        raise ParameterError(f"ipc {config.ipc} exceeds universe size {n}")
    rng = np.random.default_rng(config.seed)
    first = int(rng.integers(n))
    chosen = [first]
    row_sums = kernel.matrix.sum(axis=1)
    penalty = kernel.matrix[:, first].copy()
    gains_base = config.lam * row_sums - np.diag(kernel.matrix)
    mask = np.zeros(n, dtype=bool)
    mask[first] = True
    while len(chosen) < config.ipc:
        gains = gains_base - 2.0 * penalty
        gains[mask] = -np.inf
        nxt = int(np.argmax(gains))  # ties resolve to the lowest index
        chosen.append(nxt)
        mask[nxt] = True
        penalty += kernel.matrix[:, nxt]
    return [int(kernel.universe[i]) for i in chosen]
