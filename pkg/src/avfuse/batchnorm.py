"""BatchNorm with an explicit backward pass, and the ABRi blended layer.

The backward pass is written out term by term rather than left to the
autodiff engine so that the gamma-proportionality of the input gradient is
visible in the code:

    dL/dxhat   = dy * gamma
    dL/dvar    = sum(dL/dxhat * (x - mu)) * -1/2 * (var + eps)^(-3/2)
    dL/dmu     = sum(dL/dxhat * -1/sqrt(var + eps))
    dL/dx      = dL/dxhat / sqrt(var + eps) + dL/dvar * 2(x - mu)/M + dL/dmu / M

Sums run over the M = N*H*W entries of a channel; the variance is biased
(divided by M) both in normalisation and in the running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avfuse.errors import ContractError, DimensionError, DivisionHazardError
from avfuse.numerics.nn import Module, Parameter
from avfuse.numerics.tensor import Tensor

TRAIN, EVAL = "train", "eval"
_AXES = (0, 2, 3)


class BatchNormLayer(Module):
    tag = "bn"
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps < 0 or not 0.0 <= momentum <= 1.0:
            raise ContractError(f"invalid eps={eps} / momentum={momentum}")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.capture = False
        self.captured: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        y = batch_norm(x, self, TRAIN if self.training else EVAL)
        if self.capture:
            self.captured = y.data
        return y


@dataclass
class BNCache:
    mean: np.ndarray
    var: np.ndarray
    x_hat: np.ndarray
    x: np.ndarray
    m: int

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def _check_input(x: np.ndarray, layer: BatchNormLayer) -> None:
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects NCHW input, got {x.ndim} axes")
    if x.shape[1] != layer.channels:
        raise DimensionError(f"input axis 1 has {x.shape[1]} channels, layer has {layer.channels}")


def bn_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = TRAIN):
    """Normalise per channel, then scale by gamma and shift by beta.

    Returns ``(y, cache)`` in train mode and ``(y, None)`` in eval mode.
    Train mode also moves the running statistics toward the batch ones.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, layer)
    shape = (1, -1, 1, 1)
    if mode == TRAIN:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ContractError(f"train-mode batchnorm needs >= 2 values per channel, got {m}")
        mean = x.mean(axis=_AXES)
        var = x.var(axis=_AXES)
        if layer.eps == 0 and np.any(var == 0):
            bad = np.flatnonzero(var == 0).tolist()
            raise DivisionHazardError(f"zero batch variance with eps=0 on channels {bad}")
        x_hat = (x - mean.reshape(shape)) / np.sqrt(var + layer.eps).reshape(shape)
        mom = layer.momentum
        layer.running_mean[...] = (1.0 - mom) * layer.running_mean + mom * mean
        layer.running_var[...] = (1.0 - mom) * layer.running_var + mom * var
        y = layer.gamma.data.reshape(shape) * x_hat + layer.beta.data.reshape(shape)
        return y, BNCache(mean, var, x_hat, x, m)
    if mode != EVAL:
        raise ContractError(f"unknown batchnorm mode {mode!r}")
    denom = layer.running_var + layer.eps
    if np.any(denom <= 0):
        raise DivisionHazardError("running variance is zero with eps=0")
    x_hat = (x - layer.running_mean.reshape(shape)) / np.sqrt(denom).reshape(shape)
    return layer.gamma.data.reshape(shape) * x_hat + layer.beta.data.reshape(shape), None


def bn_backward(dy: np.ndarray, cache: BNCache, layer: BatchNormLayer):
    """Gradients ``(dx, dgamma, dbeta)`` of a train-mode forward pass."""
    if cache.channels != layer.channels or dy.shape[1] != layer.channels:
        raise DimensionError(
            f"cache has {cache.channels} channels, layer {layer.channels}, dy {dy.shape[1]}"
        )
    shape = (1, -1, 1, 1)
    gamma = layer.gamma.data.reshape(shape)
    std = np.sqrt(cache.var + layer.eps)
    centered = cache.x - cache.mean.reshape(shape)
    # d_xhat = dy * gamma; every term is linear in d_xhat, so gamma is applied
    # once at the end and dx stays exactly proportional to it
    d_var = (dy * centered).sum(axis=_AXES) * -0.5 * std ** -3
    d_mu = (dy * (-1.0 / std.reshape(shape))).sum(axis=_AXES)
    dx = gamma * (
        dy / std.reshape(shape)
        + d_var.reshape(shape) * 2.0 * centered / cache.m
        + d_mu.reshape(shape) / cache.m
    )
    dgamma = (dy * cache.x_hat).sum(axis=_AXES)
    dbeta = dy.sum(axis=_AXES)
    return dx, dgamma, dbeta


def _bn_node(x: Tensor, layer: BatchNormLayer, mode: str):
    y, cache = bn_forward(x.data, layer, mode)
    parents = (x, layer.gamma, layer.beta)
    if cache is not None:
        return Tensor.from_op(y, parents, lambda g: bn_backward(g, cache, layer)), cache
    # eval mode: statistics are constants, so the op is affine in x
    shape = (1, -1, 1, 1)
    inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
    x_hat = (x.data - layer.running_mean.reshape(shape)) * inv_std.reshape(shape)

    def bw_eval(g):
        return (
            g * (layer.gamma.data * inv_std).reshape(shape),
            (g * x_hat).sum(axis=_AXES),
            g.sum(axis=_AXES),
        )

    return Tensor.from_op(y, parents, bw_eval), None


def batch_norm(x: Tensor, layer: BatchNormLayer, mode: str = TRAIN) -> Tensor:
    """Graph node around :func:`bn_forward` / :func:`bn_backward`."""
    return _bn_node(x, layer, mode)[0]


# --------------------------------------------------------------------------- ABRi

class ABRiLayer(Module):
    """Per-channel blend of a checkpointed BN layer with a fresh one:
    ``y = alpha * bn_ori(x) + (1 - alpha) * bn_add(x)``."""

    tag = "abri"

    def __init__(self, bn_ori: BatchNormLayer, bn_add: BatchNormLayer, alpha: Tensor):
        super().__init__()
        c = bn_ori.channels
        if bn_add.channels != c or alpha.shape != (c,):
            raise DimensionError(
                f"ABRi parts disagree on channels: ori={c}, add={bn_add.channels}, alpha={alpha.shape}"
            )
        self.bn_ori = bn_ori
        self.bn_add = bn_add
        self.alpha = alpha
        self.capture = False
        self.captured: np.ndarray | None = None
        self.training = bn_ori.training

    @property
    def channels(self) -> int:
        return self.bn_ori.channels

    def forward(self, x: Tensor) -> Tensor:
        y, _ = abri_forward(x, self, TRAIN if self.training else EVAL)
        if self.capture:
            self.captured = y.data
        return y


def abri_wrap(layer: BatchNormLayer, init_alpha: float = 0.5) -> ABRiLayer:
    if isinstance(layer, ABRiLayer):
        raise ContractError("layer is already ABRi-wrapped")
    if not isinstance(layer, BatchNormLayer):
        raise ContractError(f"abri_wrap expects a BatchNormLayer, got {type(layer).__name__}")
    bn_add = BatchNormLayer(layer.channels, eps=layer.eps, momentum=layer.momentum)
    bn_add.train(layer.training)
    alpha = Parameter(np.full(layer.channels, float(init_alpha)))
    return ABRiLayer(layer, bn_add, alpha)


def abri_forward(x: Tensor, layer: ABRiLayer, mode: str = TRAIN):
    """Blend both branches; returns ``(y, (cache_ori, cache_add))``.

    The branch outputs are graph nodes, so gradients reach alpha, both
    parameter sets and ``x`` through the ordinary engine.
    """
    y_ori, cache_ori = _bn_node(x, layer.bn_ori, mode)
    y_add, cache_add = _bn_node(x, layer.bn_add, mode)
    a = layer.alpha.reshape((1, -1, 1, 1))
    y = a * y_ori + (1.0 - a) * y_add
    return y, (cache_ori, cache_add)


def abri_param_count(layer: ABRiLayer) -> tuple[int, int, float]:
    """(original trainable, additional trainable, additional / original)."""
    c = layer.channels
    original = layer.bn_ori.gamma.size + layer.bn_ori.beta.size
    additional = layer.bn_add.gamma.size + layer.bn_add.beta.size + layer.alpha.size
    assert original == 2 * c and additional == 3 * c
    return original, additional, additional / original


def reset_abnormal(layer: BatchNormLayer, threshold: float = 1e-10) -> list[int]:
    """Naive baseline: set abnormal (gamma, beta) pairs back to (1, 0).

    Kept only for side-by-side comparison with ABRi; returns reset channel ids.
    """
    ids = np.flatnonzero(
        (np.abs(layer.gamma.data) < threshold) & (np.abs(layer.beta.data) < threshold)
    )
    layer.gamma.data[ids] = 1.0
    layer.beta.data[ids] = 0.0
    return ids.tolist()
