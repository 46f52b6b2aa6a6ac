"""SmallConvNet backbones and the uni-/multi-modal heads built on them.

Each block is Conv3x3(stride 2) -> norm -> ReLU.  With residual connections
on, the block input is added back through a parameter-free shortcut
(strided subsampling plus zero channel padding) before the ReLU.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from avfuse.batchnorm import ABRiLayer, BatchNormLayer, abri_wrap
from avfuse.errors import ContractError
from avfuse.numerics import functional as F
from avfuse.numerics.nn import Conv2d, Linear, Module
from avfuse.numerics.tensor import Tensor


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 16, 16)
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    residual_connections: bool = False
    n_classes: int = 6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.channels = [int(c) for c in self.channels]
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ContractError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if len(self.channels) < 1:
            raise ContractError("block count must be >= 1")
        if min(self.channels) < 1:
            raise ContractError(f"every channel count must be >= 1, got {self.channels}")
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")

    @property
    def block_count(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class ConvBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, residual: bool,
                 rng: np.random.Generator, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False, rng=rng)
        self.norm: BatchNormLayer | ABRiLayer = BatchNormLayer(out_channels, eps, momentum)
        self.residual = residual
        self.out_channels = out_channels
        self.capture = False  # keep the post-ReLU map for diagnostics
        self.captured: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(self.conv(x))
        if self.residual and x.shape[1] <= self.out_channels:
            h = h + F.downsample_shortcut(x, self.out_channels, 2)
        out = F.relu(h)
        if self.capture:
            self.captured = out.data
        return out


class Encoder(Module):
    """Stack of ConvBlocks followed by global average pooling."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        in_c = config.input_shape[0]
        self.blocks = []
        for c in config.channels:
            self.blocks.append(ConvBlock(in_c, c, config.residual_connections, rng,
                                         config.bn_eps, config.bn_momentum))
            in_c = c

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return F.global_avg_pool(x)


class Classifier(Module):
    """Encoder plus a linear head; the uni-modal model."""

    def __init__(self, config: ModelConfig, seed: int = 0, encoder: Encoder | None = None):
        super().__init__()
        rng = np.random.default_rng([seed, 1])
        self.config = config
        self.encoder = encoder if encoder is not None else Encoder(config, rng)
        self.head = Linear(self.encoder.feature_dim, config.n_classes, rng=np.random.default_rng([seed, 2]))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encoder(x))


class MultiModalNet(Module):
    """Two encoders whose pooled features are concatenated into one linear classifier."""

    def __init__(self, encoder_a: Encoder, encoder_v: Encoder, n_classes: int, seed: int = 0):
        super().__init__()
        self.encoder_a = encoder_a
        self.encoder_v = encoder_v
        self.head = Linear(encoder_a.feature_dim + encoder_v.feature_dim, n_classes,
                           rng=np.random.default_rng([seed, 3]))

    def forward(self, x_a: Tensor, x_v: Tensor) -> Tensor:
        return self.head(F.concat([self.encoder_a(x_a), self.encoder_v(x_v)], axis=1))


def norm_layers(model: Module) -> list[tuple[str, BatchNormLayer | ABRiLayer]]:
    """Top-level normalisation layers in model order (inner ABRi branches excluded)."""
    out = []
    for name, m in model.named_modules():
        if isinstance(m, ABRiLayer):
            out.append((name, m))
        elif isinstance(m, BatchNormLayer) and not name.endswith((".bn_ori", ".bn_add")):
            out.append((name, m))
    return out


def wrap_abri(model: Module, init_alpha: float = 0.5, prefix: str = "",
              blocks: set[str] | None = None) -> int:
    """Replace plain BN layers by ABRi wrappers; returns the count.

    Only blocks whose name starts with ``prefix`` (and, if given, appears in
    ``blocks``) are wrapped.
    """
    count = 0
    for name, m in list(model.named_modules()):
        if not isinstance(m, ConvBlock) or not isinstance(m.norm, BatchNormLayer):
            continue
        if not name.startswith(prefix) or (blocks is not None and name not in blocks):
            continue
        m.norm = abri_wrap(m.norm, init_alpha)
        count += 1
    return count


def adapt_input_channels(encoder: Encoder, in_channels: int) -> None:
    """Resize the first conv to ``in_channels`` inputs by averaging then tiling filters."""
    conv = encoder.blocks[0].conv
    w = conv.weight.data
    if w.shape[1] == in_channels:
        return
    mean = w.mean(axis=1, keepdims=True) * (w.shape[1] / in_channels)
    conv.weight.data = np.repeat(mean, in_channels, axis=1)
    encoder.config.input_shape = (in_channels,) + tuple(encoder.config.input_shape[1:])


def describe(model: Module) -> dict:
    """JSON-able architecture description, enough for :func:`build_model`."""
    if isinstance(model, Classifier):
        return {"kind": "classifier", "config": asdict(model.config)}
    if isinstance(model, MultiModalNet):
        return {
            "kind": "multimodal",
            "config_a": asdict(model.encoder_a.config),
            "config_v": asdict(model.encoder_v.config),
            "n_classes": int(model.head.weight.shape[0]),
        }
    raise ContractError(f"cannot describe {type(model).__name__}")


def build_model(desc: dict, abri_blocks: set[str] = frozenset()) -> Module:
    """Fresh model from :func:`describe` output; ``abri_blocks`` get wrapped."""
    kind = desc.get("kind")
    if kind == "classifier":
        model: Module = Classifier(ModelConfig(**desc["config"]))
    elif kind == "multimodal":
        enc_a = Encoder(ModelConfig(**desc["config_a"]), np.random.default_rng(0))
        enc_v = Encoder(ModelConfig(**desc["config_v"]), np.random.default_rng(1))
        model = MultiModalNet(enc_a, enc_v, desc["n_classes"])
    else:
        raise ContractError(f"unknown model kind {kind!r}")
    if abri_blocks:
        wrap_abri(model, blocks=set(abri_blocks))
    return model
