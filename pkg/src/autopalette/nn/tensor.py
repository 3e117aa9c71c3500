"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small operator set: dense arithmetic with broadcasting,
reductions, matmul (optionally batched), 2-d convolution with same padding,
instance normalization, ReLU, 2x2 average pooling, softmax family, and a
straight-through node. Graphs are built eagerly by closures; `backward`
walks the graph once and returns a gradient map for the leaves.

Arrays keep whatever float dtype they come in with: tests run in float64,
training loops in float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, NumericError, ShapeError


class Tensor:
    """A node in the computation graph: an ndarray plus backward plumbing."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def detach(self):
        return Tensor(self.data, requires_grad=False)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp):
    """Create a graph node; skip bookkeeping when no parent needs gradients."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Backpropagate from a scalar loss node.

    Returns a mapping {leaf Tensor: gradient ndarray} covering every leaf
    with requires_grad that the loss depends on. A second call on the same
    loss node raises: gradients of a re-used graph silently double-count,
    so the graph must be rebuilt by a fresh forward pass first.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise ContractError("backward called twice on the same loss node; re-run the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return {}

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def xlogx(a):
    """x * log(x) with the x -> 0 limit handled: value 0, gradient 0."""
    a = as_tensor(a)
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, safe * np.log(safe), 0.0)
    return _node(out, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),))


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _node(a.data[idx], (a,), vjp)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def tmax(a, axis):
    """Max along a single axis; ties send the gradient to the lowest index."""
    a = as_tensor(a)
    ax = axis % a.data.ndim
    out = a.data.max(axis=ax)
    arg = a.data.argmax(axis=ax)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product; supports stacked batches on either operand."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _node(a.data @ b.data, (a, b), vjp)


def linear(x, w, b=None):
    """x @ w (+ b): x is (N, D), w is (D, M), b is (M,)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# softmax family

def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _node(ls, (a,), vjp)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under `logits` rows."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"cross_entropy expects (N, C) logits and (N,) labels, "
                         f"got {logits.data.shape} and {labels.shape}")
    lp = log_softmax(logits, axis=1)
    n = labels.shape[0]
    picked = getitem(lp, (np.arange(n), labels))
    return mul(tsum(picked), -1.0 / n)


# ---------------------------------------------------------------------------
# conv / norm / pool

def _im2col(x, kh, kw):
    """(N, C, H, W) -> contiguous (N*H*W, C*kh*kw) patches, same padding."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _conv_forward(x, w):
    n, _, h, wd = x.shape
    f, c, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(f, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, h, wd, f).transpose(0, 3, 1, 2)), cols


def conv2d(x, w, b=None):
    """2-d convolution, stride 1, same (zero) padding, odd square kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) and (F,C,kh,kw), got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape[1]}, kernel {w.data.shape[1]}")
    kh, kw = w.data.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d supports odd kernel sizes only")

    needs_grad = x.requires_grad or w.requires_grad
    out_data, cols = _conv_forward(x.data, w.data)
    if not needs_grad:
        cols = None  # free the patch matrix on inference paths

    def vjp(g):
        n, f, h, wd = g.shape
        gmat = g.transpose(0, 2, 3, 1).reshape(n * h * wd, f)
        gw = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            # full correlation with the flipped, channel-swapped kernel
            wflip = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx, _ = _conv_forward(np.ascontiguousarray(g), wflip)
        return (gx, gw)

    out = _node(out_data, (x, w), vjp)
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, -1, 1, 1)))
    return out


def instance_norm(x, scale, shift, eps=1e-5):
    """Per-sample per-channel normalization over the spatial axes."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects (N,C,H,W), got {x.data.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    sc = scale.data.reshape(1, -1, 1, 1)
    out = xhat * sc + shift.data.reshape(1, -1, 1, 1)

    def vjp(g):
        gxhat = g * sc
        gx = None
        if x.requires_grad:
            m1 = gxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        gs = (g * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return (gx, gs, gb)

    return _node(out, (x, scale, shift), vjp)


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        g4 = np.broadcast_to(g[:, :, :, None, :, None] * 0.25, (n, c, h // 2, 2, w // 2, 2))
        return (g4.reshape(n, c, h, w),)

    return _node(out, (x,), vjp)


def straight_through(hard_data, soft):
    """Forward the hard (non-differentiable) values, backprop the soft path."""
    soft = as_tensor(soft)
    if np.shape(hard_data) != soft.data.shape:
        raise ShapeError(f"straight_through shape mismatch: {np.shape(hard_data)} vs {soft.data.shape}")
    return _node(np.asarray(hard_data, dtype=soft.data.dtype), (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f, point, eps=1e-6, return_flagged=False):
    """Compare the analytic gradient of `f` at `point` with central differences.

    Returns the max over coordinates of |analytic - numeric| / max(1, |analytic|).
    Coordinates sitting on a kink (the one-sided slopes disagree, e.g. ReLU
    at exactly zero) are excluded from the max; pass return_flagged=True to
    also get their indices.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    loss = f(x)
    f0 = float(loss.data)
    if not np.isfinite(f0):
        raise NumericError("function value is not finite at the evaluation point")
    analytic = backward(loss).get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    kinked = np.zeros(flat.shape, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
        # one-sided slopes disagreeing by O(1) marks a subgradient boundary
        a = abs(analytic.reshape(-1)[i])
        kinked[i] = abs(fp + fm - 2.0 * f0) / eps > 1e-2 * max(1.0, a)

    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    err[kinked] = 0.0
    max_err = float(err.max()) if err.size else 0.0
    if return_flagged:
        return max_err, np.flatnonzero(kinked)
    return max_err
