"""Differentiable operations on :class:`Tensor`.

Plain ``*_forward`` helpers work on ndarrays and are what the tests compare
against brute-force oracles; the un-suffixed versions wrap them into graph
nodes.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from avfuse.errors import DimensionError
from avfuse.numerics.tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return Tensor.from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape} (axis 1)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


# --------------------------------------------------------------------------- conv

def _check_conv(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got {x.ndim} axes")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d weight must be OxIxKxK, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 = {x.shape[1]}, weight axis 1 = {w.shape[1]}"
        )
    if b is not None and np.shape(b) != (w.shape[0],):
        raise DimensionError(f"conv2d bias shape {np.shape(b)} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    k = w.shape[2]
    ho = (x.shape[2] + 2 * padding - k) // stride + 1
    wo = (x.shape[3] + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output spatial dims not positive: ({ho}, {wo}) on axes 2,3")
    return ho, wo


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, K, K) -> (N, Ho, Wo, C, K, K)
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with an OxIxKxK filter bank."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    _check_conv(x, weight, bias, stride, padding)
    cols = _im2col(x, weight.shape[2], stride, padding)
    out = np.tensordot(cols, weight, axes=([3, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    xd, wd = x.data, weight.data
    _check_conv(xd, wd, None if bias is None else bias.data, stride, padding)
    k = wd.shape[2]
    cols = _im2col(xd, k, stride, padding)
    out = np.tensordot(cols, wd, axes=([3, 4, 5], [1, 2, 3]))
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        g_nhwo = g.transpose(0, 2, 3, 1)
        dw = np.tensordot(g_nhwo, cols, axes=([0, 1, 2], [0, 1, 2]))  # O,C,K,K
        dcols = np.tensordot(g_nhwo, wd, axes=([3], [0]))  # N,Ho,Wo,C,K,K
        n, c, h, w = xd.shape
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        ho, wo = g.shape[2], g.shape[3]
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    return Tensor.from_op(
        x.data.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),),
    )


def downsample_shortcut(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free identity shortcut: strided subsampling plus zero channel padding."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise DimensionError(f"shortcut cannot shrink channels {c} -> {out_channels}")
    sub_ = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub_.shape[2:])
    out[:, :c] = sub_

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, ::stride, ::stride] = g[:, :c]
        return (dx,)

    return Tensor.from_op(out, (x,), bw)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# --------------------------------------------------------------------------- loss

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_confidence(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy and the per-sample softmax probability of the true class."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} out of range [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), labels] - logsumexp
    probs = np.exp(z - logsumexp[:, None])
    confidence = probs[np.arange(n), labels]
    loss = -log_p.mean()

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor.from_op(np.asarray(loss), (logits,), bw), confidence
