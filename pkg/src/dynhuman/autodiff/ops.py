"""Differentiable operations.

Every op is registered in ``REGISTRY`` together with a sampler that draws
small random inputs; the gradient-check suite walks the registry, so a new
op is covered as soon as it is registered.

Shape rules:
    add/sub/mul/div     numpy broadcasting
    matmul              (..., n, k) @ (..., k, m), batch dims broadcast
    conv2d              x (N, C, H, W), w (O, C, kh, kw), b (O,)
    transposed_conv2d   x (N, C, H, W), w (C, O, kh, kw), b (O,);
                        out H = (H - 1) * stride - 2 * pad + kh
    bilinear_resize     (N, C, H, W) -> (N, C, H', W'), half-pixel centres
    softmax/log_softmax along ``axis``
    cross_entropy       logits (N, L, H, W), labels int (N, H, W), optional weight (N, H, W)
    l1                  mean |a - b| over ``weight`` (broadcast to a)
    sparse_matmul       constant scipy.sparse (n, k) times x (k, c)
"""
from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import GraphError, Tensor, as_tensor, make


@dataclass
class OpSpec:
    name: str
    fn: Callable
    sample: Callable  # rng -> (tensor inputs, kwargs)


REGISTRY: dict[str, OpSpec] = {}


def register(name, sample):
    def deco(fn):
        REGISTRY[name] = OpSpec(name, fn, sample)
        return fn
    return deco


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dt))


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


# --------------------------------------------------------------------------- elementwise

@register("add", lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], {}))
def add(a, b):
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


@register("sub", lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 1))], {}))
def sub(a, b):
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


@register("mul", lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 1))], {}))
def mul(a, b):
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                "mul")


@register("div", lambda r: ([r.normal(size=(3, 2)), _away_from_zero(r, (3, 2), 0.5)], {}))
def div(a, b):
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / b.data, a.shape),
                           _unbroadcast(-g * out / b.data, b.shape)), "div")


@register("neg", lambda r: ([r.normal(size=(4,))], {}))
def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg")


@register("exp", lambda r: ([r.normal(size=(3, 3))], {}))
def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


@register("log", lambda r: ([r.uniform(0.5, 2.0, (3, 3))], {}))
def log(a):
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


@register("sqrt", lambda r: ([r.uniform(0.5, 2.0, (5,))], {}))
def sqrt(a):
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


@register("abs", lambda r: ([_away_from_zero(r, (4, 3))], {}))
def abs(a):  # noqa: A001
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


@register("pow", lambda r: ([r.uniform(0.5, 2.0, (3, 2))], {"p": 3.0}))
def pow(a, p):  # noqa: A001
    out = a.data ** p
    return make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


@register("leaky_relu", lambda r: ([_away_from_zero(r, (3, 5), 0.05)], {}))
def leaky_relu(a, alpha=0.2):
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.dtype)
    return make(a.data * slope, (a,), lambda g: (g * slope,), "leaky_relu")


@register("relu", lambda r: ([_away_from_zero(r, (3, 5), 0.05)], {}))
def relu(a):
    pos = (a.data > 0).astype(a.dtype)
    return make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


@register("sigmoid", lambda r: ([r.normal(size=(3, 4))], {}))
def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


@register("tanh", lambda r: ([r.normal(size=(3, 4))], {}))
def tanh(a):
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# --------------------------------------------------------------------------- reductions / shape

@register("sum", lambda r: ([r.normal(size=(2, 3, 4))], {"axis": 1, "keepdims": True}))
def sum(a, axis=None, keepdims=False):  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make(np.asarray(out), (a,), bw, "sum")


@register("mean", lambda r: ([r.normal(size=(2, 3, 4))], {"axis": (0, 2)}))
def mean(a, axis=None, keepdims=False):
    n = a.data.size / max(np.asarray(np.sum(a.data, axis=axis, keepdims=keepdims)).size, 1)
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


@register("reshape", lambda r: ([r.normal(size=(2, 6))], {"shape": (3, 4)}))
def reshape(a, shape):
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


@register("transpose", lambda r: ([r.normal(size=(2, 3, 4))], {"axes": (2, 0, 1)}))
def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


@register("concat", lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))], {"axis": 1}))
def concat(*tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))
    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


@register("slice", lambda r: ([r.normal(size=(4, 5))], {"idx": (builtins.slice(1, 3), builtins.slice(None, None, 2))}))
def slice(a, idx):  # noqa: A001
    basic = all(isinstance(i, (int, builtins.slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return make(np.asarray(a.data[idx]), (a,), bw, "slice")


# --------------------------------------------------------------------------- linear algebra

@register("matmul", lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], {}))
def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GraphError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise GraphError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return make(a.data @ b.data, (a, b), bw, "matmul")


def _sparse_sample(r):
    import scipy.sparse as sp
    M = sp.random(6, 5, density=0.4, random_state=int(r.integers(1 << 30)), format="csr")
    return [r.normal(size=(5, 3))], {"M": M}


@register("sparse_matmul", _sparse_sample)
def sparse_matmul(x, M):
    """``M @ x`` for a constant sparse matrix ``M``."""
    if M.shape[1] != x.shape[0]:
        raise GraphError("sparse_matmul shape mismatch")
    MT = M.T.tocsr()
    out = np.asarray(M @ x.data, dtype=x.dtype)
    return make(out, (x,), lambda g: (np.asarray(MT @ g, dtype=x.dtype),), "sparse_matmul")


# --------------------------------------------------------------------------- convolutions

def _im2col(xp, kh, kw, stride, Ho, Wo):
    """NHWC padded input -> (N*Ho*Wo, kh*kw*C) patch rows, tap-major then channel."""
    N, _, _, C = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)


def _col2im(cols, shape_p, kh, kw, stride, Ho, Wo):
    """Adjoint of :func:`_im2col`; ``shape_p`` is the padded NHWC shape."""
    N, Hp, Wp, C = shape_p
    c = cols.reshape(N, Ho, Wo, kh, kw, C)
    out = np.zeros(shape_p, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i: i + stride * (Ho - 1) + 1: stride, j: j + stride * (Wo - 1) + 1: stride, :] += c[:, :, :, i, j, :]
    return out


def _nhwc_pad(x, pad):
    return _nhwc_pad_xy(x, pad, pad)


def _nhwc_pad_xy(x, py, px):
    """NCHW -> zero-padded NHWC copy."""
    N, C, H, W = x.shape
    out = np.zeros((N, H + 2 * py, W + 2 * px, C), dtype=x.dtype)
    out[:, py: py + H, px: px + W, :] = x.transpose(0, 2, 3, 1)
    return out


def _conv_sample(r):
    return [r.normal(size=(2, 3, 6, 5)), r.normal(size=(4, 3, 3, 3)), r.normal(size=(4,))], \
        {"stride": 2, "pad": 1}


@register("conv2d", _conv_sample)
def conv2d(x, w, b=None, stride=1, pad=0):
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise GraphError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise GraphError("conv2d output would be empty")
    xp = _nhwc_pad(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    Wm = w.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ Wm.T
    if b is not None:
        out += b.data
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad and stride == 1 and pad < min(kh, kw):
            # stride 1: the input gradient is a convolution of g with the flipped kernel
            gcols = _im2col(_nhwc_pad_xy(g, kh - 1 - pad, kw - 1 - pad), kh, kw, 1, H, W)
            Wf = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
            gx = (gcols @ Wf).reshape(N, H, W, C).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            gxp = _col2im(gm @ Wm, xp.shape, kh, kw, stride, Ho, Wo)
            gx = gxp[:, pad: pad + H, pad: pad + W, :].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)
    return make(out, parents, bw, "conv2d")


def _tconv_sample(r):
    return [r.normal(size=(2, 3, 3, 4)), r.normal(size=(3, 2, 4, 4)), r.normal(size=(2,))], \
        {"stride": 2, "pad": 1}


@register("transposed_conv2d", _tconv_sample)
def transposed_conv2d(x, w, b=None, stride=1, pad=0):
    N, C, H, W = x.shape
    Cw, O, kh, kw = w.shape
    if C != Cw:
        raise GraphError(f"transposed_conv2d channel mismatch: input {C}, kernel {Cw}")
    Hp, Wp = (H - 1) * stride + kh, (W - 1) * stride + kw
    if Hp - 2 * pad < 1 or Wp - 2 * pad < 1:
        raise GraphError("transposed_conv2d output would be empty")
    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, C)
    Wm = w.data.transpose(0, 2, 3, 1).reshape(C, -1)
    yp = _col2im(xm @ Wm, (N, Hp, Wp, O), kh, kw, stride, H, W)
    out = yp[:, pad: Hp - pad, pad: Wp - pad, :]
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = _nhwc_pad(g, pad)
        gcols = _im2col(gp, kh, kw, stride, H, W)
        gx = (gcols @ Wm.T).reshape(N, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(C, kh, kw, O).transpose(0, 3, 1, 2) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return make(out, parents, bw, "transposed_conv2d")


def _resize_matrix(n_in, n_out, dtype):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    A[np.arange(n_out), i0] += 1 - f
    A[np.arange(n_out), i1] += f
    return A


@register("bilinear_resize", lambda r: ([r.normal(size=(1, 2, 3, 4))], {"size": (5, 7)}))
def bilinear_resize(x, size):
    Ah = _resize_matrix(x.shape[2], size[0], x.dtype)
    Aw = _resize_matrix(x.shape[3], size[1], x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", Ah, x.data, Aw, optimize=True)
    return make(out, (x,), lambda g: (np.einsum("oh,ncop,pw->nchw", Ah, g, Aw, optimize=True),),
                "bilinear_resize")


# --------------------------------------------------------------------------- classification / losses

@register("softmax", lambda r: ([r.normal(size=(2, 5, 3))], {"axis": 1}))
def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make(out, (a,), bw, "softmax")


@register("log_softmax", lambda r: ([r.normal(size=(2, 5, 3))], {"axis": 1}))
def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def _ce_sample(r):
    return [r.normal(size=(2, 7, 3, 4))], {"labels": r.integers(0, 7, (2, 3, 4)),
                                           "weight": r.uniform(0, 1, (2, 3, 4))}


@register("cross_entropy", _ce_sample)
def cross_entropy(logits, labels, weight=None):
    """Weighted mean over pixels of ``-log softmax(logits)[label]`` (class axis 1)."""
    labels = np.asarray(labels)
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    w = np.ones_like(picked) if weight is None else np.asarray(weight, dtype=x.dtype)
    denom = max(float(w.sum()), 1e-12)
    loss = -(w * picked).sum() / denom

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        return (g * (p - onehot) * (w / denom)[:, None],)
    return make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def _l1_sample(r):
    return [_away_from_zero(r, (2, 3, 4, 4)), np.zeros((2, 3, 4, 4))], \
        {"weight": (r.uniform(size=(2, 1, 4, 4)) > 0.3).astype(float)}


@register("l1", _l1_sample)
def l1(a, b, weight=None):
    """Mean absolute difference, averaged over the (broadcast) weight mass."""
    a, b = _t(a), _t(b, a)
    d = a.data - b.data
    w = np.ones((1,) * d.ndim, dtype=d.dtype) if weight is None else np.asarray(weight, dtype=d.dtype)
    wb = np.broadcast_to(w, d.shape)
    denom = max(float(wb.sum()), 1e-12)
    out = (wb * np.abs(d)).sum() / denom

    def bw(g):
        gd = g * wb * np.sign(d) / denom
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)
    return make(np.asarray(out, dtype=d.dtype), (a, b), bw, "l1")
