"""Small reverse-mode autodiff engine over numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``backward`` walks the graph in reverse
topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


class DimensionError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise on NaN/+Inf produced by any forward op (-inf is allowed)."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype.type != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _CHECK_FINITE and (np.isnan(data).any() or np.isposinf(data).any()):
        raise FloatingPointError(f"non-finite value produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.data, b.data, "add")
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast(a.data, b.data, "mul")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bw(g):
        _accumulate(a, -g * out_data * out_data)

    return _make(out_data, (a,), bw, "reciprocal")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), bw, "log")


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g):
        _accumulate(a, g * pos)

    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), bw, "relu")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), bw, "abs")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- shape ops -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out_data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(np.array(out_data, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(start, start + n)
            _accumulate(t, g[tuple(sl)])
            start += n

    return _make(out_data, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# -- reductions ------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out_data), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def max_over_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; the gradient goes to the first maximal entry only."""
    if a.shape[axis] < 1:
        raise DimensionError(f"max_over_axis: empty axis {axis} in shape {a.shape}")
    arg = np.argmax(a.data, axis=axis)  # argmax returns the lowest index on ties
    values = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    values = np.squeeze(values, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(a, full)

    return _make(values, (a,), bw, "max"), arg


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out_data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, fused so the batch dims collapse into one GEMM."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _make(out, parents, bw, "linear")


# -- normalization and distributions ------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data
    if x.shape[axis] == 0:
        raise DimensionError("softmax over empty axis")
    mx = data.max(axis=axis, keepdims=True)
    if np.isneginf(mx).any():
        raise ValueError("softmax: slice with every entry -inf has no distribution")
    e = np.exp(data - mx)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data
    mx = data.max(axis=axis, keepdims=True)
    if np.isneginf(mx).any():
        raise ValueError("log_softmax: slice with every entry -inf has no distribution")
    shifted = data - mx
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    try:
        mask_b = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask_b, np.asarray(value, dtype=x.dtype), x.data)

    def bw(g):
        _accumulate(x, np.where(mask_b, 0, g).astype(g.dtype))

    return _make(out, (x,), bw, "masked_fill")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            dx = (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n) * inv
            _accumulate(x, dx)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -- losses ---------------------------------------------------------------

def cross_entropy(logits: Tensor, target, label_smoothing: float = 0.0,
                  row_weights=None) -> Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)).

    ``target`` is either a distribution with the same shape as ``logits`` or
    an integer array of class ids. Smoothing mixes the target with uniform.
    ``row_weights`` (0/1 for padding) turns the mean into a weighted mean.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")
    n_cls = logits.shape[-1]
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target)
    if tgt.dtype.kind in "iu":
        if tgt.shape != logits.shape[:-1]:
            raise DimensionError(f"cross_entropy: ids {tgt.shape} vs logits {logits.shape}")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= n_cls):
            raise ValueError("cross_entropy: class id out of range")
        dist = np.zeros(logits.shape, dtype=logits.dtype)
        np.put_along_axis(dist, tgt[..., None], 1.0, axis=-1)
    else:
        if tgt.shape != logits.shape:
            raise DimensionError(f"cross_entropy: target {tgt.shape} vs logits {logits.shape}")
        if not np.allclose(tgt.sum(axis=-1), 1.0, rtol=0, atol=1e-6) or (tgt < 0).any():
            raise ValueError("cross_entropy: target rows must be distributions")
        dist = tgt.astype(logits.dtype)
    if label_smoothing:
        dist = dist * (1.0 - label_smoothing) + label_smoothing / n_cls
    if row_weights is None:
        w = np.ones(logits.shape[:-1], dtype=logits.dtype)
    else:
        w = np.asarray(row_weights, dtype=logits.dtype)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no rows to average over")

    data = logits.data
    mx = data.max(axis=-1, keepdims=True)
    shifted = data - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    # 0 * -inf must not poison masked classes
    contrib = np.where(dist > 0, dist * logp, 0.0)
    loss = -(contrib.sum(axis=-1) * w).sum() / denom
    out = np.asarray(loss, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        grad = (p * dist.sum(axis=-1, keepdims=True) - dist) * (w / denom)[..., None]
        _accumulate(logits, g * grad)

    return _make(out, (logits,), bw, "cross_entropy")


def bce_with_logits(logits: Tensor, targets, label_smoothing: float = 0.0,
                    weights=None) -> Tensor:
    """Mean elementwise binary cross-entropy on logits.

    Smoothing maps a target t to t(1 - eps) + eps/2.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")
    if label_smoothing:
        t = t * (1.0 - label_smoothing) + label_smoothing / 2.0
    w = np.ones_like(t) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=logits.dtype), t.shape)
    denom = w.sum()
    z = logits.data
    # -[t log s(z) + (1-t) log(1-s(z))] = max(z,0) - z t + log(1 + exp(-|z|))
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((elem * w).sum() / denom, dtype=logits.dtype)

    def bw(g):
        _accumulate(logits, g * (_sigmoid(z) - t) * w / denom)

    return _make(out, (logits,), bw, "bce_with_logits")


def bce(probs: Tensor, targets, label_smoothing: float = 0.0, weights=None,
        clip: float = 1e-7) -> Tensor:
    """Binary cross-entropy on probabilities (used on pooled softmax outputs)."""
    t = np.asarray(targets, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise DimensionError(f"bce: targets {t.shape} vs probs {probs.shape}")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce: targets must lie in [0, 1]")
    if label_smoothing:
        t = t * (1.0 - label_smoothing) + label_smoothing / 2.0
    w = np.ones_like(t) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=probs.dtype), t.shape)
    denom = w.sum()
    p = np.clip(probs.data, clip, 1.0 - clip)
    inside = (probs.data > clip) & (probs.data < 1.0 - clip)
    elem = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = np.asarray((elem * w).sum() / denom, dtype=probs.dtype)

    def bw(g):
        d = (-(t / p) + (1.0 - t) / (1.0 - p)) * inside
        _accumulate(probs, g * d * w / denom)

    return _make(out, (probs,), bw, "bce")


# -- lookup, dropout, patches ---------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(f"embedding: id out of range for table of {weight.shape[0]} rows")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _make(out, (weight,), bw, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), bw, "dropout")


def unfold2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """(B, C, H, W) -> (B, Ho*Wo, C*k*k) patch matrix for convolution."""
    b, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"unfold2d: kernel {kernel} larger than input {x.shape}")
    ii = (np.arange(ho) * stride)[:, None, None, None] + np.arange(kernel)[None, None, :, None]
    jj = (np.arange(wo) * stride)[None, :, None, None] + np.arange(kernel)[None, None, None, :]
    ii = np.broadcast_to(ii, (ho, wo, kernel, kernel))
    jj = np.broadcast_to(jj, (ho, wo, kernel, kernel))
    patches = xp[:, :, ii, jj]  # (B, C, ho, wo, k, k)
    out = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kernel * kernel)

    def bw(g):
        gp = g.reshape(b, ho, wo, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        full = np.zeros_like(xp)
        np.add.at(full, (slice(None), slice(None), ii, jj), gp)
        if padding:
            full = full[:, :, padding:-padding, padding:-padding]
        _accumulate(x, full)

    return _make(np.ascontiguousarray(out), (x,), bw, "unfold2d")


# -- graph traversal ---------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns the gradients of ``params`` (zeros for parameters the loss does
    not reach) when a name -> tensor map is given.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node.grad = None  # interior gradients are transient
        node._backward(g)
    if params is None:
        return {}
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in params.items()}


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        agrad = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f(*inputs).data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(agrad[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
