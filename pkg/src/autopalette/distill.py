"""Distribution-matching distillation over a palette-condensed synthetic set,
plus classifier-based evaluation of the stored artifact.

Each outer iteration samples a fresh random ConvNet, matches class-wise mean
features of real batches against the condensed synthetic images, updates the
synthetic pixels by the task gradient only, and updates the palette network
by task + bucket-utilization losses. K >= 256 disables the palette branch
entirely (raw 8-bit mode), which reduces the loop to plain DM.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .image_io import LabeledDataset, zca_fit
from .nn.convnet import ConvNetParams, forward_convnet
from .nn.optim import adam_step, sgd_step
from .nn.tensor import Tensor, backward, cross_entropy, matmul, reshape, tmean, tsum
from .palette import (
    PaletteNetParams, forward_prob_map, hard_assignments, hard_palette,
    loss_align, loss_balance, loss_max_color, reconstruct,
)
from .quantize import PER_CHANNEL, QuantizedImage, median_cut, median_cut_indices
from .selector import SelectionConfig, gradient_features, greedy_select, similarity_kernel

RAW_K = 256


@dataclass
class DistillConfig:
    # palette network
    k: int = 64
    hidden: int = 64
    tau: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 3.0
    palette_lr: float = 0.05
    palette_optimizer: str = "adam"
    palette_momentum: float = 0.9
    # distillation loop
    ipc: int = 10
    iterations: int = 2000
    image_lr: float = 1.0
    image_momentum: float = 0.5
    real_batch_per_class: int = 64
    synthetic_batch_per_class: int = 0  # 0 = the whole class every iteration
    init: str = "graph-cut-quantized"   # graph-cut-real | random-real
    lam: float = 1.0
    # backbone
    net_width: int = 64
    net_depth: int = 3
    # preprocessing
    zca: bool = True
    zca_eps: float = 0.1
    # evaluation
    eval_epochs: int = 300
    eval_lr: float = 0.01
    eval_momentum: float = 0.9
    eval_batch: int = 64
    eval_seeds: int = 3
    # run control
    seed: int = 0
    log_every: int = 50
    deterministic: bool = True

    _INITS = ("graph-cut-quantized", "graph-cut-real", "random-real")

    def __post_init__(self):
        if self.k < 1 or self.k > 256:
            raise ConfigError(f"k must be in [1, 256], got {self.k}")
        for name in ("ipc", "iterations", "real_batch_per_class", "net_width",
                     "net_depth", "eval_epochs", "eval_batch", "eval_seeds", "hidden"):
            if getattr(self, name) < (0 if name == "iterations" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("image_lr", "palette_lr", "eval_lr", "tau", "lam", "zca_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.init not in self._INITS:
            raise ConfigError(f"init must be one of {self._INITS}, got {self.init!r}")
        if self.palette_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"palette_optimizer must be adam or sgd, got {self.palette_optimizer!r}")

    @property
    def palette_enabled(self):
        return self.k < RAW_K

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticSet:
    images: np.ndarray             # (M, C, H, W) float in [0, 1]
    labels: np.ndarray             # (M,)
    palette_params: PaletteNetParams | None
    provenance: dict = field(default_factory=dict)

    @property
    def class_count(self):
        return int(self.labels.max()) + 1


class FeatureSpace:
    """Optional ZCA whitening applied to everything the backbone sees."""

    def __init__(self, transform=None, dtype=np.float32):
        self.transform = transform
        self.dtype = dtype
        if transform is not None:
            self._mean = transform.mean.astype(dtype)
            self._matrix = transform.matrix.astype(dtype)

    def apply_const(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if self.transform is None:
            return x
        flat = x.reshape(len(x), -1)
        return ((flat - self._mean) @ self._matrix).reshape(x.shape).astype(self.dtype)

    def apply(self, batch):
        """Differentiable version for Tensors."""
        if not isinstance(batch, Tensor):
            return Tensor(self.apply_const(batch))
        if self.transform is None:
            return batch
        n = batch.data.shape[0]
        shape = batch.data.shape
        flat = reshape(batch, (n, -1)) - self._mean
        return reshape(matmul(flat, Tensor(self._matrix)), shape)


def dm_task_loss(real_batches_by_class, synthetic_by_class, net):
    """Sum over classes of || mean phi(real batch) - mean phi(synthetic) ||^2.

    Real batches are treated as constants; gradients flow only through the
    synthetic side (which is expected to be palette-condensed Tensors).
    """
    total = None
    for real, syn in zip(real_batches_by_class, synthetic_by_class):
        real_arr = real.data if isinstance(real, Tensor) else np.asarray(real)
        syn_len = syn.data.shape[0] if isinstance(syn, Tensor) else len(syn)
        if len(real_arr) == 0 or syn_len == 0:
            raise ShapeError("empty class batch in dm_task_loss")
        mu_real = forward_convnet(net, real_arr).data.mean(axis=0)
        mu_syn = tmean(forward_convnet(net, syn), axis=0)
        diff = mu_syn - Tensor(mu_real)
        term = tsum(diff * diff)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# initialization

def initialize_synthetic(dataset, config, rng, space=None):
    """Pick ipc images per class by the configured strategy; returns
    (float images in [0,1], labels, provenance)."""
    per_class = dataset.class_indices()
    chosen = []
    if config.init == "random-real":
        for idxs in per_class:
            chosen.append(rng.choice(idxs, size=config.ipc, replace=False))
    else:
        quantize_first = config.init == "graph-cut-quantized" and config.palette_enabled
        net = ConvNetParams.random(dataset.images.shape[1], dataset.class_count,
                                   dataset.images.shape[2:], depth=config.net_depth,
                                   width=config.net_width, rng=rng, dtype=np.float32)
        if space is None:
            space = FeatureSpace(zca_fit(dataset.images, config.zca_eps) if config.zca else None)
        for cls, idxs in enumerate(per_class):
            imgs = dataset.images[idxs]
            if quantize_first:
                imgs = np.stack([median_cut(im, config.k).reconstruct() for im in imgs])
            feats = gradient_features(net, space.apply_const(imgs / 255.0),
                                      np.full(len(idxs), cls))
            kernel = similarity_kernel(feats, universe=idxs)
            sel = greedy_select(kernel, SelectionConfig(
                ipc=config.ipc, lam=config.lam, seed=int(rng.integers(2 ** 31))))
            chosen.append(np.asarray(sel))
    order = np.concatenate(chosen)
    images = dataset.images[order].astype(np.float32) / 255.0
    labels = dataset.labels[order]
    provenance = {"init": config.init, "indices": [c.tolist() for c in chosen]}
    return images, labels, provenance


# ---------------------------------------------------------------------------
# the distillation loop

def _sample_iteration(rng, dataset_indices, config, dataset_hw, channels, classes):
    """Fresh net and per-class real-batch indices; the only rng consumers in
    the loop, shared by distill_run and plain_dm_run so seeds line up."""
    net = ConvNetParams.random(channels, classes, dataset_hw, depth=config.net_depth,
                               width=config.net_width, rng=rng, dtype=np.float32)
    batches = []
    for idxs in dataset_indices:
        take = min(config.real_batch_per_class, len(idxs))
        batches.append(rng.choice(idxs, size=take, replace=False))
    return net, batches


def _metric_row(it, task, lm, lb, la, active, wall_ms):
    return {"iter": int(it), "task_loss": float(task), "l_m": float(lm),
            "l_b": float(lb), "l_a": float(la), "active_buckets": float(active),
            "wall_ms": float(wall_ms)}


def _active_raw(images):
    """Distinct 8-bit values per channel, averaged; utilization of raw images."""
    u8 = np.round(np.asarray(images) * 255).astype(np.uint8)
    flat = u8.reshape(-1, u8.shape[-2] * u8.shape[-1])
    return float(np.mean([np.unique(row).size for row in flat]))


def distill_run(dataset, config):
    """Run the condensation loop; returns (SyntheticSet, list of metric rows)."""
    ss = np.random.SeedSequence(config.seed)
    init_ss, loop_ss, palette_ss = ss.spawn(3)
    rng_init = np.random.default_rng(init_ss)
    rng_loop = np.random.default_rng(loop_ss)

    space = FeatureSpace(zca_fit(dataset.images, config.zca_eps) if config.zca else None)
    images, labels, provenance = initialize_synthetic(dataset, config, rng_init, space)
    classes = dataset.class_count
    n_total = len(images)
    channels, h, w = images.shape[1:]
    real_input = space.apply_const(dataset.images.astype(np.float32) / 255.0)
    per_class_idx = dataset.class_indices()

    palette = None
    pal_flat = pal_state = None
    if config.palette_enabled:
        palette = PaletteNetParams.random(channels, config.k, hidden=config.hidden,
                                          tau=config.tau,
                                          rng=np.random.default_rng(palette_ss),
                                          dtype=np.float32)
        pal_flat = palette.flat()

    synth = images.astype(np.float32)
    vel_s = None
    metrics = []
    aux_on = config.palette_enabled and (config.alpha or config.beta or config.gamma)

    for it in range(config.iterations):
        t0 = time.perf_counter()
        net, batch_idx = _sample_iteration(rng_loop, per_class_idx, config, (h, w), channels, classes)

        s_tensor = Tensor(synth, requires_grad=True)
        pal_tensors = pal_map = None
        if config.palette_enabled:
            pal_tensors = palette.with_flat(
                {n: Tensor(v, requires_grad=True) for n, v in pal_flat.items()})
            pal_map = pal_tensors.flat()

        grad_s = np.zeros_like(synth)
        grad_pal = {n: np.zeros_like(v) for n, v in (pal_flat or {}).items()}
        task_total = 0.0
        lm_total = lb_total = la_total = 0.0
        active_total = 0.0

        for cls in range(classes):
            lo, hi = cls * config.ipc, (cls + 1) * config.ipc
            if config.synthetic_batch_per_class:
                take = min(config.synthetic_batch_per_class, config.ipc)
                pick = lo + rng_loop.permutation(config.ipc)[:take]
                xs = s_tensor[np.sort(pick)]
            else:
                xs = s_tensor[lo:hi]

            if config.palette_enabled:
                m = forward_prob_map(pal_tensors, xs)
                condensed = reconstruct(xs, m, "ste")
                active_total += _count_active(m) * xs.data.shape[0]
            else:
                m = None
                condensed = xs
                active_total += _active_raw(xs.data) * xs.data.shape[0]

            real = real_input[batch_idx[cls]]
            task_c = dm_task_loss([real], [space.apply(condensed)], net)
            if not np.isfinite(task_c.data):
                raise TrainingError(f"non-finite task loss at iteration {it}")
            task_total += task_c.item()
            gmap = backward(task_c)
            grad_s += gmap.get(s_tensor, 0.0)
            if pal_map:
                for n, t in pal_map.items():
                    if t in gmap:
                        grad_pal[n] += gmap[t]

            if aux_on:
                weight = xs.data.shape[0] / n_total
                refs = np.stack([median_cut_indices(im, config.k)
                                 for im in np.round(xs.data * 255).astype(np.uint8)])
                lm = loss_max_color(m)
                lb = loss_balance(m)
                la = loss_align(m, refs)
                aux = (config.alpha * lm + config.beta * lb + config.gamma * la) * weight
                lm_total += lm.item() * weight
                lb_total += lb.item() * weight
                la_total += la.item() * weight
                gmap2 = backward(aux)
                for n, t in pal_map.items():
                    if t in gmap2:
                        grad_pal[n] += gmap2[t]

        new_s, vel_s = sgd_step({"s": synth}, {"s": grad_s}, lr=config.image_lr,
                                momentum=config.image_momentum, velocity=vel_s, step=it)
        synth = np.clip(new_s["s"], 0.0, 1.0).astype(np.float32)

        if config.palette_enabled:
            if config.palette_optimizer == "adam":
                pal_flat, pal_state = adam_step(pal_flat, grad_pal, lr=config.palette_lr,
                                                state=pal_state, step=it)
            else:
                pal_flat, pal_state = sgd_step(pal_flat, grad_pal, lr=config.palette_lr,
                                               momentum=config.palette_momentum,
                                               velocity=pal_state, step=it)

        if it % config.log_every == 0 or it == config.iterations - 1:
            wall = 0.0 if config.deterministic else (time.perf_counter() - t0) * 1e3
            metrics.append(_metric_row(it, task_total, lm_total, lb_total, la_total,
                                       active_total / n_total, wall))

    if config.palette_enabled:
        palette = palette.with_flat(pal_flat)
    synth_set = SyntheticSet(images=synth, labels=labels, palette_params=palette,
                             provenance={**provenance, "seed": config.seed, "k": config.k})
    return synth_set, metrics


def _count_active(m):
    idx = hard_assignments(m)
    flat = idx.reshape(-1, idx.shape[-2] * idx.shape[-1])
    return float(np.mean([np.unique(row).size for row in flat]))


def plain_dm_run(dataset, config):
    """Reference distribution matching on raw images: an independent loop with
    no palette machinery at all, used to validate the degenerate K=256 path."""
    ss = np.random.SeedSequence(config.seed)
    init_ss, loop_ss, _ = ss.spawn(3)
    rng_init = np.random.default_rng(init_ss)
    rng_loop = np.random.default_rng(loop_ss)

    space = FeatureSpace(zca_fit(dataset.images, config.zca_eps) if config.zca else None)
    images, labels, _ = initialize_synthetic(dataset, config, rng_init, space)
    classes = dataset.class_count
    channels, h, w = images.shape[1:]
    real_input = space.apply_const(dataset.images.astype(np.float32) / 255.0)
    per_class_idx = dataset.class_indices()

    synth = images.astype(np.float32)
    vel = None
    losses = []
    for it in range(config.iterations):
        net, batch_idx = _sample_iteration(rng_loop, per_class_idx, config, (h, w), channels, classes)
        s_tensor = Tensor(synth, requires_grad=True)
        grad = np.zeros_like(synth)
        total = 0.0
        for cls in range(classes):
            xs = s_tensor[cls * config.ipc:(cls + 1) * config.ipc]
            loss = dm_task_loss([real_input[batch_idx[cls]]], [space.apply(xs)], net)
            total += loss.item()
            grad += backward(loss).get(s_tensor, 0.0)
        new, vel = sgd_step({"s": synth}, {"s": grad}, lr=config.image_lr,
                            momentum=config.image_momentum, velocity=vel, step=it)
        synth = np.clip(new["s"], 0.0, 1.0).astype(np.float32)
        losses.append(total)
    return synth, labels, losses


# ---------------------------------------------------------------------------
# export / condensation to the stored artifact

def condense_synthetic(synth_set):
    """Hard-quantize the learned images into QuantizedImages (the artifact).

    K >= 256: raw 8-bit storage with an identity palette. Otherwise the
    palette network assigns buckets and per-image palettes are the bucket
    means rounded half-up to 8 bits.
    """
    out = []
    if synth_set.palette_params is None:
        identity = np.tile(np.arange(256, dtype=np.uint8), (synth_set.images.shape[1], 1))
        for img in synth_set.images:
            u8 = np.round(np.asarray(img, dtype=np.float64) * 255).astype(np.uint8)
            out.append(QuantizedImage(identity.copy(), u8.astype(np.int64), RAW_K, PER_CHANNEL))
        return out
    params = synth_set.palette_params
    for img in synth_set.images:
        m = forward_prob_map(params, np.asarray(img, dtype=np.float32)).data
        idx = hard_assignments(m)
        pal = hard_palette(np.asarray(img, dtype=np.float64), m)
        pal_u8 = np.floor(np.clip(pal, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
        out.append(QuantizedImage(pal_u8, idx.astype(np.int64), params.k, PER_CHANNEL))
    return out


def decoded_images(quantized_list):
    """Float [0,1] images from stored QuantizedImages."""
    return np.stack([q.reconstruct() for q in quantized_list]).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# evaluation

def _train_classifier(images, labels, config, rng, classes, dtype=np.float32):
    net = ConvNetParams.random(images.shape[1], classes, images.shape[2:],
                               depth=config.net_depth, width=config.net_width,
                               rng=rng, dtype=dtype)
    flat = net.flat()
    vel = None
    n = len(images)
    x = np.asarray(images, dtype=dtype)
    y = np.asarray(labels)
    for epoch in range(config.eval_epochs):
        lr = 0.5 * config.eval_lr * (1.0 + np.cos(np.pi * epoch / config.eval_epochs))
        perm = rng.permutation(n)
        for lo in range(0, n, config.eval_batch):
            sel = perm[lo:lo + config.eval_batch]
            params, tmap = ConvNetParams.from_flat(flat).tensors()
            logits = forward_convnet(params, x[sel], mode="logits")
            loss = cross_entropy(logits, y[sel])
            grads = backward(loss)
            gflat = {name: grads[t] for name, t in tmap.items() if t in grads}
            flat, vel = sgd_step(flat, gflat, lr=lr, momentum=config.eval_momentum,
                                 velocity=vel, step=epoch)
    return ConvNetParams.from_flat(flat)


def _top1(net, images, labels, batch=500):
    hits = 0
    for lo in range(0, len(images), batch):
        logits = forward_convnet(net, images[lo:lo + batch], mode="logits").data
        hits += int((logits.argmax(axis=1) == labels[lo:lo + batch]).sum())
    return hits / len(images)


def evaluate(images, labels, test_set, config, transform=None):
    """Train fresh classifiers on the (already hard-quantized, decoded)
    synthetic images, one per eval seed; returns (mean, std, per-seed accs).

    `test_set` is a LabeledDataset; whitening (when configured) is applied to
    both sides using `transform` fit on the distillation source data.
    """
    if len(images) == 0:
        raise ShapeError("empty synthetic set")
    space = FeatureSpace(transform) if transform is not None else FeatureSpace(None)
    train_x = space.apply_const(np.asarray(images, dtype=np.float32))
    test_x = space.apply_const(test_set.images.astype(np.float32) / 255.0)
    classes = test_set.class_count
    ss = np.random.SeedSequence([config.seed, 9_151]).spawn(config.eval_seeds)
    accs = []
    for child in ss:
        rng = np.random.default_rng(child)
        net = _train_classifier(train_x, labels, config, rng, classes)
        accs.append(_top1(net, test_x, test_set.labels))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std()), accs.tolist()


# ---------------------------------------------------------------------------
# metrics export

def export_metrics(log, path, summary=None):
    """JSON-lines metric rows plus one final summary row."""
    with open(path, "w") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": summary or {}}, sort_keys=True) + "\n")
    return path
