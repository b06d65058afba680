"""Differentiable operations on :class:`Tensor`.

All reductions go through numpy in a fixed order, so identical inputs give
bit-identical outputs.
"""

import math

import numpy as np

from .. import kernels
from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b, out_shape


def _cast(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def add(a, b):
    if not isinstance(a, Tensor):
        a = _cast(a, b)
    b = _cast(b, a)
    a, b, _ = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _cast(a, b)
    b = _cast(b, a)
    a, b, _ = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    if not isinstance(a, Tensor):
        a = _cast(a, b)
    b = _cast(b, a)
    a, b, _ = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def scale(x, c):
    """Multiply by a constant scalar."""
    c = x.data.dtype.type(c)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(x.data * c, (x,), backward, "scale")


def neg(x):
    return scale(x, -1.0)


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "matmul")


def sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), backward, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(x.data, axes), (x,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tuple(tensors), backward, "concat")


def getitem(x, index):
    """Basic (slice/integer) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor.from_op(np.array(out), (x,), backward, "getitem")


def take(x, indices):
    """Gather rows of ``x`` along axis 0; repeated indices accumulate."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return (full,)

    return Tensor.from_op(x.data[indices], (x,), backward, "take")


def softmax(x):
    """Softmax over the last axis."""
    y = kernels.softmax_rows(x.data)

    def backward(g):
        return (kernels.softmax_rows_backward(y, g),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def fused_attention(qkv, heads, bias=None):
    """Multi-head scaled dot-product attention as a single graph node.

    ``qkv`` is ``[B, T, 3*heads*D_h]`` laid out ``[q heads | k heads | v heads]``;
    ``bias`` (optional) is ``[heads, T, T]``. Returns the merged head outputs
    ``[B, T, heads*D_h]``. Work is done one batch item at a time so the
    ``T x T`` weights stay cache-resident; results equal the unfused
    composition of matmul, scale and softmax bit for bit.
    """
    if qkv.ndim != 3 or qkv.shape[2] % (3 * heads):
        raise ShapeMismatch(f"qkv {qkv.shape} is not [B, T, 3*{heads}*D_h]")
    b, t, width = qkv.shape
    d_h = width // (3 * heads)
    if bias is not None and bias.shape != (heads, t, t):
        raise ShapeMismatch(f"attention bias {bias.shape} != {(heads, t, t)}")
    dt = qkv.dtype.type
    c = dt(1.0 / math.sqrt(d_h))
    # [3, B, heads, T, D_h]
    parts = np.ascontiguousarray(qkv.data.reshape(b, t, 3, heads, d_h).transpose(2, 0, 3, 1, 4))
    qs = parts[0] * c
    k, v = parts[1], parts[2]
    w = np.empty((b, heads, t, t), dtype=qkv.dtype)
    out = np.empty((b, t, heads, d_h), dtype=qkv.dtype)
    for i in range(b):
        s = np.matmul(qs[i], np.swapaxes(k[i], -1, -2))
        if bias is not None:
            s = s + bias.data
        w[i] = kernels.softmax_rows(s)
        out[i] = np.matmul(w[i], v[i]).transpose(1, 0, 2)

    def backward(g):
        g = g.reshape(b, t, heads, d_h)
        dparts = np.empty((3, b, heads, t, d_h), dtype=qkv.dtype)
        dbias = np.zeros((heads, t, t), dtype=qkv.dtype) if bias is not None else None
        for i in range(b):
            gi = np.ascontiguousarray(g[i].transpose(1, 0, 2))
            dparts[2, i] = np.matmul(np.swapaxes(w[i], -1, -2), gi)
            ds = kernels.softmax_rows_backward(w[i], np.matmul(gi, np.swapaxes(v[i], -1, -2)))
            if dbias is not None:
                dbias += ds
            dparts[0, i] = np.matmul(ds, k[i]) * c
            dparts[1, i] = np.matmul(np.swapaxes(ds, -1, -2), qs[i])
        dqkv = dparts.transpose(1, 3, 0, 2, 4).reshape(b, t, width)
        return (dqkv, dbias) if bias is not None else (dqkv,)

    parents = (qkv,) if bias is None else (qkv, bias)
    return Tensor.from_op(out.reshape(b, t, heads * d_h), parents, backward, "attention")


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm params {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor.from_op(out, (x, gain, bias), backward, "layer_norm")


def gelu(x):
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    inner = c * (d + k * (d * d * d))
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor.from_op(out.astype(d.dtype), (x,), backward, "gelu")


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is ``[C]`` or ``[B, C]``.
    """
    squeeze = logits.ndim == 1
    data = logits.data[None, :] if squeeze else logits.data
    targets = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if data.ndim != 2 or targets.shape != (data.shape[0],):
        raise ShapeMismatch(f"cross_entropy logits {logits.shape} vs targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= data.shape[1]:
        raise ShapeMismatch("target class index out of range")
    z = data - data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(data.shape[0])
    n = data.shape[0]
    loss = -logp[rows, targets].sum() / n

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        grad *= g / n
        return (grad[0] if squeeze else grad,)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = lambda self, *axes: transpose(
    self, (axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else axes) or None)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
