"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays carry the data, each op records a
closure that maps the output gradient to input gradients, and :func:`backward`
walks the graph in reverse topological order. Enough to train a small GPT.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (for gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def inputs(self):
        return self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)


def tensor(data, requires_grad=False, name=None):
    """Leaf tensor in the current default precision."""
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = _wrap(a, b) if not isinstance(a, Tensor) else a
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    b = _wrap(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def sigmoid(x):
    out = _stable_sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    out = (z * cdf).astype(z.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return ((g * (cdf + z * pdf)).astype(z.dtype, copy=False),)

    return _node(out, (x,), bw)


def dropout(x, p, rng):
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=()):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)


def getitem(x, index):
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def tensor_sum(x, axis=None):
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def tensor_mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with numpy batching semantics (both operands >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch dims into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), bw)


def conv1d_causal(x, kernel, bias=None):
    """Causal 1-D convolution over the time axis.

    ``x`` is ``[..., T, c_in]`` and ``kernel`` is ``[k, c_in, c_out]``. The
    input is left-padded with ``k - 1`` zero frames, so output frame t only
    sees input frames ``t-k+1 .. t``.
    """
    k, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"conv1d_causal channel mismatch: {x.shape} vs kernel {kernel.shape}")
    T = x.shape[-2]
    lead = x.shape[:-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    # frame j of the window = input frame t - (k-1) + j
    cols = np.concatenate([xp[..., j : j + T, :] for j in range(k)], axis=-1)
    w2 = kernel.data.reshape(k * c_in, c_out)
    out = cols @ w2

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(*lead, T, k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + T, :] += gcols[..., j, :]
            gx = gxp[..., k - 1 :, :]
        if kernel.requires_grad:
            flat_cols = cols.reshape(-1, k * c_in)
            gk = (flat_cols.T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        return gx, gk

    res = _node(out, (x, kernel), bw)
    return res if bias is None else add(res, bias)


# ---------------------------------------------------------------- normalizers


def softmax_lastdim(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out.astype(x.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------- losses


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``weights`` (same shape as ``targets``) masks positions; the mean is taken
    over the total weight.
    """
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    w = np.ones(targets.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((g * (p - onehot) * (w / total)[..., None]).astype(logits.dtype),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def bce_with_logits(logits, targets, weights=None):
    """Mean binary cross-entropy between sigmoid(logits) and 0/1 ``targets``.

    ``weights`` broadcasts against ``targets``; the mean is taken over the
    total broadcast weight.
    """
    z = logits.data
    t = np.asarray(targets, dtype=logits.dtype)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("bce_with_logits: no positions carry weight")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = (per * w).sum() / total

    def bw(g):
        return ((g * (_stable_sigmoid(z) - t) * w / total).astype(z.dtype),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------- backward


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a mapping leaf tensor -> gradient array.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- optimization


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients by one factor so their joint L2 norm is <= max_norm.

    Returns ``(clipped, pre_clip_norm)``; gradients already within the bound
    come back unchanged.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads.values())
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place on ``params[name].data``.

    ``weight_decay`` adds an L2 term ``wd * param`` to each gradient before
    the moment updates. Parameters absent from ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[[], Tensor],
    points: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` rebuilds the scalar loss from the current contents of ``points``.
    The error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_coords`` only that many coordinates per point are probed.
    """
    for p in points:
        p.grad = None
        p.requires_grad = True
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]
    worst = 0.0
    for p, ga in zip(points, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in points:
        p.grad = None
    return worst
