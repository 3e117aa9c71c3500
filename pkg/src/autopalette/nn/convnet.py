"""The evaluation/backbone ConvNet: D blocks of conv3x3 -> instance norm ->
ReLU -> 2x2 average pool, followed by a linear classifier on the flattened
last block output."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, avg_pool2, conv2d, instance_norm, linear, relu, reshape


@dataclass
class ConvNetParams:
    conv_w: list        # per block: (width, c_in, 3, 3)
    conv_b: list        # per block: (width,)
    norm_scale: list    # per block: (width,)
    norm_shift: list    # per block: (width,)
    fc_w: np.ndarray    # (feature_dim, num_classes)
    fc_b: np.ndarray    # (num_classes,)

    @property
    def depth(self):
        return len(self.conv_w)

    @property
    def width(self):
        return self.conv_w[0].shape[0]

    @property
    def num_classes(self):
        return self.fc_b.shape[0]

    @classmethod
    def random(cls, in_channels, num_classes, image_hw, depth=3, width=64,
               rng=None, dtype=np.float32):
        """He-normal conv weights, unit norm scales, zero biases/shifts."""
        rng = rng if rng is not None else np.random.default_rng()
        h, w = image_hw
        if h % (2 ** depth) or w % (2 ** depth):
            raise ShapeError(f"{h}x{w} images cannot be pooled {depth} times")
        conv_w, conv_b, norm_scale, norm_shift = [], [], [], []
        c_in = in_channels
        for _ in range(depth):
            fan_in = c_in * 9
            conv_w.append((rng.standard_normal((width, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype))
            conv_b.append(np.zeros(width, dtype=dtype))
            norm_scale.append(np.ones(width, dtype=dtype))
            norm_shift.append(np.zeros(width, dtype=dtype))
            c_in = width
        feat_dim = width * (h // 2 ** depth) * (w // 2 ** depth)
        fc_w = (rng.standard_normal((feat_dim, num_classes)) * np.sqrt(1.0 / feat_dim)).astype(dtype)
        fc_b = np.zeros(num_classes, dtype=dtype)
        return cls(conv_w, conv_b, norm_scale, norm_shift, fc_w, fc_b)

    def flat(self):
        """Name -> array view of all parameters, for the optimizer."""
        out = {}
        for i in range(self.depth):
            out[f"conv{i}.w"] = self.conv_w[i]
            out[f"conv{i}.b"] = self.conv_b[i]
            out[f"norm{i}.scale"] = self.norm_scale[i]
            out[f"norm{i}.shift"] = self.norm_shift[i]
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    @classmethod
    def from_flat(cls, flat):
        depth = sum(1 for k in flat if k.startswith("conv") and k.endswith(".w"))
        return cls(
            conv_w=[flat[f"conv{i}.w"] for i in range(depth)],
            conv_b=[flat[f"conv{i}.b"] for i in range(depth)],
            norm_scale=[flat[f"norm{i}.scale"] for i in range(depth)],
            norm_shift=[flat[f"norm{i}.shift"] for i in range(depth)],
            fc_w=flat["fc.w"], fc_b=flat["fc.b"],
        )

    def tensors(self, requires_grad=True):
        """Wrap every parameter in a Tensor; returns (params, name->Tensor)."""
        flat = {k: Tensor(v, requires_grad=requires_grad) for k, v in self.flat().items()}
        return ConvNetParams.from_flat(flat), flat


def forward_convnet(params, batch, mode="features"):
    """Run the ConvNet; returns features (N, width*H*W/4^D) or logits (N, classes)."""
    if mode not in ("features", "logits"):
        raise ValueError(f"unknown mode {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4:
        raise ShapeError(f"batch must be (N,C,H,W), got {x.data.shape}")
    depth = params.depth
    n, c, h, w = x.data.shape
    cw0 = params.conv_w[0]
    c_in = cw0.data.shape[1] if isinstance(cw0, Tensor) else cw0.shape[1]
    if c != c_in:
        raise ShapeError(f"batch has {c} channels, network expects {c_in}")
    if h % (2 ** depth) or w % (2 ** depth):
        raise ShapeError(f"spatial dims {h}x{w} not divisible by 2^{depth}")
    for i in range(depth):
        x = conv2d(x, params.conv_w[i], params.conv_b[i])
        x = instance_norm(x, params.norm_scale[i], params.norm_shift[i])
        x = relu(x)
        x = avg_pool2(x)
    feats = reshape(x, (n, -1))
    if mode == "features":
        return feats
    return linear(feats, params.fc_w, params.fc_b)
