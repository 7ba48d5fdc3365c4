"""Forward operations with hand-derived backward passes.

All ops accept leading batch axes; "rows" always means the last axis.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from petlsv.errors import DimensionError, InputError, NumericError
from petlsv.numcore.tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lift(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(out, (a, b), bw)


def scale(x, c: float):
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,))


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return Tensor.from_op(out, (x,), bw)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def identity(x):
    return as_tensor(x)


ACTIVATIONS = {"gelu": gelu, "relu": relu, "identity": identity}


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = as_tensor(x)
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return Tensor.from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def broadcast_to(x, shape):
    x = as_tensor(x)
    return Tensor.from_op(
        np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        parts = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                parts.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return Tensor.from_op(out, ts, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None):
    """``x @ W (+ b)`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    din, dout = W.shape

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = (g @ W.data.T) if x.requires_grad else None
        gW = (x.data.reshape(-1, din).T @ g2) if W.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return Tensor.from_op(y, parents, bw)


def conv1d(x, W, b, stride: int):
    """Strided 1-D convolution over time, left-padded by ``kernel - stride``.

    ``x``: (B, N, C_in), ``W``: (kernel, C_in, C_out), ``b``: (C_out,).
    Output length is exactly ``N // stride``.
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    k, cin, cout = W.shape
    if x.ndim != 3 or x.shape[-1] != cin:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with weight {W.shape}")
    if k < stride:
        raise DimensionError(f"conv1d: kernel {k} shorter than stride {stride}")
    bsz, n, _ = x.shape
    t = n // stride
    if t < 1:
        raise InputError(f"conv1d: input length {n} shorter than stride {stride}")
    pad = k - stride
    xp = np.concatenate([np.zeros((bsz, pad, cin), x.dtype), x.data], axis=1)
    win = sliding_window_view(xp, k, axis=1)[:, : stride * (t - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(bsz * t, k * cin)
    W2 = W.data.reshape(k * cin, cout)
    y = (cols @ W2 + b.data).reshape(bsz, t, cout)

    def bw(g):
        g2 = g.reshape(bsz * t, cout)
        gx = gW = gb = None
        if x.requires_grad:
            dcols = (g2 @ W2.T).reshape(bsz, t, k, cin)
            dxp = np.zeros_like(xp)
            span = stride * (t - 1) + 1
            for j in range(k):
                dxp[:, j : j + span : stride] += dcols[:, :, j]
            gx = dxp[:, pad:]
        if W.requires_grad:
            gW = (cols.T @ g2).reshape(k, cin, cout)
        if b.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gW, gb

    return Tensor.from_op(y, (x, W, b), bw)


# ---------------------------------------------------------------- normalisation


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), bw)


def attention(q, k, v, c: float):
    """``softmax_rows(c * q @ k^T) @ v`` as one node that keeps only the probabilities.

    Shapes (..., Tq, D), (..., Tk, D), (..., Tk, Dv); leading axes must match.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-1] != q.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    cc = q.dtype.type(c)
    z = (q.data @ np.swapaxes(k.data, -1, -2)) * cc
    if np.isnan(z).any():
        raise NumericError("attention: NaN in scores")
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        gz = g @ np.swapaxes(v.data, -1, -2)
        gz -= (gz * p).sum(axis=-1, keepdims=True)
        gz *= p
        gz *= cc
        gq = gz @ k.data if q.requires_grad else None
        gk = np.swapaxes(gz, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return Tensor.from_op(out, (q, k, v), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gbeta = None
        if x.requires_grad:
            dxh = g * gamma.data
            gx = inv * (
                dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return Tensor.from_op(y, (x, gamma, beta), bw)


def l2_normalize(x, axis=-1, eps: float = 1e-12):
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor.from_op(y, (x,), bw)


def cosine(a, b, axis=-1):
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------- composite ops


def mix(xs, w):
    """Weighted sum ``sum_i w[i] * xs[i]`` of same-shape tensors."""
    xs = [as_tensor(t) for t in xs]
    w = as_tensor(w)
    if w.shape != (len(xs),):
        raise DimensionError(f"mix: {len(xs)} inputs but weights of shape {w.shape}")
    out = xs[0].data * w.data[0]
    for i in range(1, len(xs)):
        out = out + xs[i].data * w.data[i]

    def bw(g):
        gxs = [g * w.data[i] if t.requires_grad else None for i, t in enumerate(xs)]
        gw = None
        if w.requires_grad:
            gw = np.array([(g * t.data).sum() for t in xs], dtype=w.dtype)
        return (*gxs, gw)

    return Tensor.from_op(out, (*xs, w), bw)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over rows of ``logits`` (B, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    bsz, ncls = logits.shape
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / bsz),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def aam_logits(cos, labels, margin: float, scale: float):
    """Additive angular margin on the target column of a cosine matrix.

    Target logit is ``scale * cos(theta_y + margin)``; when ``cos_y <= cos(pi - margin)``
    the fallback ``scale * (cos_y - margin * sin(margin))`` keeps it monotone.
    """
    cos = as_tensor(cos)
    labels = np.asarray(labels, dtype=np.int64)
    c = cos.data
    dt = c.dtype.type
    rows = np.arange(c.shape[0])
    cy = c[rows, labels]
    cos_m, sin_m = dt(math.cos(margin)), dt(math.sin(margin))
    th = dt(math.cos(math.pi - margin))
    mm = dt(math.sin(margin) * margin)
    sin_y = np.sqrt(np.clip(1.0 - cy * cy, 0.0, None)).astype(c.dtype)
    phi = cy * cos_m - sin_y * sin_m
    hard = cy > th
    target = np.where(hard, phi, cy - mm)
    out = c.copy()
    out[rows, labels] = target
    s = dt(scale)

    def bw(g):
        gc = g * s
        # floor keeps d(sin)/d(cos) finite at cos = +-1
        dphi = np.where(hard, cos_m + sin_m * cy / np.maximum(sin_y, 1e-6), 1.0).astype(c.dtype)
        gc[rows, labels] *= dphi
        return (gc,)

    return Tensor.from_op(out * s, (cos,), bw)
