"""Module base class and the parameterised layers built on it."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from avfuse.numerics import functional as F
from avfuse.numerics.tensor import Tensor


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal container: parameters are Tensors with ``requires_grad``,
    buffers are ndarrays listed in ``_buffers``, children are Modules or
    lists of Modules.  Iteration follows attribute insertion order."""

    tag = "module"
    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self._children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, "Module"]]:
        """Parameters and buffers with their owning module, in model order."""
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value.data, self
            elif key in self._buffers:
                yield name, value, self
        for key, child in self._children():
            yield from child.named_state(f"{prefix}.{key}" if prefix else key)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, np.array(v, copy=True)) for n, v, _ in self.named_state())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {n: (v, m) for n, v, m in self.named_state()}
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            current, _ = own[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != current.shape:
                raise ValueError(f"{name}: shape {value.shape} != {current.shape}")
            current[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    tag = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        )
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    tag = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
