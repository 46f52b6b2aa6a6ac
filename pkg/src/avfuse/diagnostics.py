"""Abnormal-BN scans, dead-channel detection, pathology injection, FLOPs accounting.

Abnormal channel: ``max(|gamma_k|, |beta_k|) < threshold`` (both small).

Dead channel: its post-ReLU map is all zero on at least a fraction
``sample_fraction_threshold`` of probe samples, evaluated in eval mode.  An
entry counts as zero when it is ``<= activation_tol``; the tolerance absorbs
values such as ``1e-12 * (x_hat - 1)`` that an injected (1e-12, -1e-12)
channel produces where ``x_hat > 1``.

FLOPs per sample and forward pass:

    conv    2 * K^2 * C_in * C_out * H' * W'
    BN      4 * C * H' * W'     (ABRi: two BNs plus 3 * C * H' * W' for the blend)
    ReLU    C * H' * W'
    shortcut add  C * H' * W'   (residual blocks)
    GAP     C * H' * W'
    linear  2 * in * out + out

A training epoch costs 3x forward (backward = 2x forward) per sample.
"""
from __future__ import annotations

import copy
import csv
import fnmatch
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from avfuse.batchnorm import ABRiLayer, BatchNormLayer
from avfuse.errors import ContractError
from avfuse.models import ConvBlock, ModelConfig, norm_layers
from avfuse.numerics.nn import Module
from avfuse.numerics.tensor import Tensor, no_grad

DEFAULT_THRESHOLD = 1e-10
DEFAULT_DEAD_FRACTION = 0.99
DEFAULT_ACTIVATION_TOL = 1e-6


# ---------------------------------------------------------------- health report

@dataclass
class LayerHealth:
    name: str
    channels: int
    abnormal_ids: list[int] = field(default_factory=list)
    dead_ids: list[int] = field(default_factory=list)

    @property
    def abnormal_ratio(self) -> float:
        return len(self.abnormal_ids) / self.channels if self.channels else 0.0


@dataclass
class ChannelHealthReport:
    model: str
    threshold: float
    layers: list[LayerHealth] = field(default_factory=list)
    dead_fraction: float | None = None
    activation_tol: float | None = None

    @property
    def overall_ratio(self) -> float:
        total = sum(l.channels for l in self.layers)
        return sum(len(l.abnormal_ids) for l in self.layers) / total if total else 0.0

    @property
    def n_dead(self) -> int:
        return sum(len(l.dead_ids) for l in self.layers)

    def layer(self, name: str) -> LayerHealth:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def to_json(self) -> dict:
        doc = {
            "model": self.model,
            "threshold": self.threshold,
            "layers": [
                {"name": l.name, "channels": l.channels, "abnormal_ratio": l.abnormal_ratio,
                 "abnormal_ids": list(l.abnormal_ids), "dead_ids": list(l.dead_ids)}
                for l in self.layers
            ],
        }
        if self.dead_fraction is not None:
            doc["dead_fraction"] = self.dead_fraction
            doc["activation_tol"] = self.activation_tol
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ChannelHealthReport":
        layers = [LayerHealth(l["name"], int(l["channels"]), [int(i) for i in l["abnormal_ids"]],
                              [int(i) for i in l["dead_ids"]]) for l in doc["layers"]]
        return cls(doc["model"], float(doc["threshold"]), layers,
                   doc.get("dead_fraction"), doc.get("activation_tol"))


def _scanned_bn(layer: BatchNormLayer | ABRiLayer) -> BatchNormLayer:
    return layer.bn_ori if isinstance(layer, ABRiLayer) else layer


def scan_abnormal_bn(model: Module, threshold: float = DEFAULT_THRESHOLD,
                     model_name: str = "model") -> ChannelHealthReport:
    """Per-layer abnormal (gamma, beta) pairs; ABRi layers are judged by ``bn_ori``."""
    if threshold <= 0:
        raise ContractError(f"threshold must be > 0, got {threshold}")
    report = ChannelHealthReport(model_name, float(threshold))
    layers = norm_layers(model)
    if not layers:
        warnings.warn(f"{model_name}: no BatchNorm layers found; report is empty", stacklevel=2)
    for name, layer in layers:
        bn = _scanned_bn(layer)
        mag = np.maximum(np.abs(bn.gamma.data), np.abs(bn.beta.data))
        report.layers.append(LayerHealth(name, bn.channels, np.flatnonzero(mag < threshold).tolist()))
    return report


def _select(names: list[str], selector) -> list[str]:
    if selector is None:
        return list(names)
    if callable(selector):
        return [n for n in names if selector(n)]
    if isinstance(selector, str):
        return [n for n in names if fnmatch.fnmatchcase(n, selector)]
    wanted = set(selector)
    return [n for n in names if n in wanted]


def detect_dead_channels(model: Module, probe_x: np.ndarray,
                         layer_selector: str | Callable[[str], bool] | list[str] | None = None,
                         sample_fraction_threshold: float = DEFAULT_DEAD_FRACTION,
                         activation_tol: float = DEFAULT_ACTIVATION_TOL,
                         batch_size: int = 256, forward: Callable | None = None) -> dict[str, list[int]]:
    """Dead channel ids per selected norm layer (keyed by norm-layer name).

    ``forward(model, x)`` runs the model on a probe batch; by default the
    model is called with ``x`` alone.  The model's train/eval flag is restored.
    """
    if not 0.0 < sample_fraction_threshold <= 1.0:
        raise ContractError(f"sample_fraction_threshold must be in (0, 1], got {sample_fraction_threshold}")
    if len(probe_x) == 0:
        raise ContractError("probe set is empty")
    blocks = {f"{n}.norm" if n else "norm": m for n, m in model.named_modules() if isinstance(m, ConvBlock)}
    chosen = _select(list(blocks), layer_selector)
    if not chosen:
        raise ContractError(f"layer selector {layer_selector!r} matched none of {list(blocks)}")
    forward = forward or (lambda m, x: m(Tensor(x)))
    was_training = model.training
    model.eval()
    dead_counts = {n: np.zeros(blocks[n].out_channels, dtype=np.int64) for n in chosen}
    try:
        for n in chosen:
            blocks[n].capture = True
        with no_grad():
            for i in range(0, len(probe_x), batch_size):
                forward(model, probe_x[i:i + batch_size])
                for n in chosen:
                    act = blocks[n].captured
                    flat = act.reshape(act.shape[0], act.shape[1], -1)
                    dead_counts[n] += np.all(flat <= activation_tol, axis=2).sum(axis=0)
    finally:
        for n in chosen:
            blocks[n].capture = False
            blocks[n].captured = None
        model.train(was_training)
    n_probe = len(probe_x)
    return {n: np.flatnonzero(c >= sample_fraction_threshold * n_probe - 1e-9).tolist()
            for n, c in dead_counts.items()}


def health_report(model: Module, probe_x: np.ndarray | None = None, threshold: float = DEFAULT_THRESHOLD,
                  sample_fraction_threshold: float = DEFAULT_DEAD_FRACTION,
                  activation_tol: float = DEFAULT_ACTIVATION_TOL, model_name: str = "model",
                  forward: Callable | None = None) -> ChannelHealthReport:
    """Abnormal scan plus, when probes are given, dead-channel ids for every layer."""
    report = scan_abnormal_bn(model, threshold, model_name)
    if probe_x is not None and report.layers:
        dead = detect_dead_channels(model, probe_x, None, sample_fraction_threshold, activation_tol,
                                    forward=forward)
        for l in report.layers:
            l.dead_ids = dead.get(l.name, [])
        report.dead_fraction = sample_fraction_threshold
        report.activation_tol = activation_tol
    return report


# ---------------------------------------------------------------- injection

def n_injected(fraction: float, channels: int) -> int:
    # round first so 0.3 * 10 = 3.0000000000000004 does not become 4
    return int(math.ceil(round(fraction * channels, 9)))


def inject_abnormal(model: Module, fraction: float, magnitude: float = 1e-12, sign_of_beta: int = -1,
                    seed: int = 0) -> tuple[Module, list[dict]]:
    """Copy of ``model`` with ``ceil(fraction * C)`` channels per BN layer set to
    ``gamma = magnitude, beta = sign_of_beta * magnitude``; returns (model, provenance)."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must be in [0, 1], got {fraction}")
    if magnitude <= 0:
        raise ContractError(f"magnitude must be > 0, got {magnitude}")
    if sign_of_beta not in (1, -1):
        raise ContractError(f"sign_of_beta must be +1 or -1, got {sign_of_beta}")
    model = copy.deepcopy(model)
    provenance = []
    for idx, (name, layer) in enumerate(norm_layers(model)):
        bn = _scanned_bn(layer)
        k = n_injected(fraction, bn.channels)
        if k == 0:
            continue
        rng = np.random.default_rng([seed, idx])
        ids = np.sort(rng.choice(bn.channels, size=k, replace=False))
        bn.gamma.data[ids] = magnitude
        bn.beta.data[ids] = sign_of_beta * magnitude
        provenance.append({"layer": name, "channels": ids.tolist(), "magnitude": magnitude,
                           "sign_of_beta": sign_of_beta})
    return model, provenance


# ---------------------------------------------------------------- FLOPs

@dataclass(frozen=True)
class Phase:
    name: str
    flops_per_epoch: float
    epochs: float

    @property
    def total(self) -> float:
        return self.flops_per_epoch * self.epochs


@dataclass
class FlopsLedger:
    phases: list[Phase]
    reference: list[str]
    comparison: list[str]

    def _total(self, names: list[str]) -> float:
        by_name = {p.name: p for p in self.phases}
        return sum(by_name[n].total for n in names)

    @property
    def reference_total(self) -> float:
        return self._total(self.reference)

    @property
    def comparison_total(self) -> float:
        return self._total(self.comparison)

    @property
    def ratio(self) -> float:
        return self.comparison_total / self.reference_total


def count_flops(phases: dict[str, tuple[float, float]] | list[Phase], reference: list[str],
                comparison: list[str]) -> FlopsLedger:
    """Totals by summation; ratio = comparison total / reference total."""
    if isinstance(phases, dict):
        plist = [Phase(k, float(v[0]), float(v[1])) for k, v in phases.items()]
    else:
        plist = list(phases)
    names = {p.name for p in plist}
    for p in plist:
        if not (p.flops_per_epoch > 0 and p.epochs > 0):
            raise ContractError(f"phase {p.name!r}: flops_per_epoch and epochs must be positive")
    missing = [n for n in list(reference) + list(comparison) if n not in names]
    if missing:
        raise ContractError(f"unknown phases {missing}")
    ledger = FlopsLedger(plist, list(reference), list(comparison))
    if ledger.reference_total <= 0:
        raise ContractError("reference phase set has zero total FLOPs")
    return ledger


# per-epoch FLOPs and epoch counts of joint training vs. two-stage tuning on three datasets
REFERENCE_FLOPS = {
    "kinetics-sounds": {
        "phases": {"jt": (1.02e10, 60), "stage1-a": (4.77e9, 40), "stage1-v": (5.48e9, 80),
                   "stage2": (1.02e10, 20)},
        "reference": ["jt"], "comparison": ["stage1-a", "stage1-v", "stage2"],
    },
    "ave": {
        "phases": {"jt": (2.36e10, 50), "stage1-a": (5.17e9, 40), "stage1-v": (1.85e10, 50),
                   "stage2": (2.36e10, 30)},
        "reference": ["jt"], "comparison": ["stage1-a", "stage1-v", "stage2"],
    },
    "ucf-101": {
        "phases": {"jt": (1.10e10, 50), "stage1-a": (5.48e9, 20), "stage1-v": (5.48e9, 80),
                   "stage2": (1.10e10, 20)},
        "reference": ["jt"], "comparison": ["stage1-a", "stage1-v", "stage2"],
    },
}


def conv_out(size: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_flops(c_in: int, c_out: int, kernel: int, h_out: int, w_out: int) -> int:
    return 2 * kernel * kernel * c_in * c_out * h_out * w_out


def forward_flops(config: ModelConfig, abri: bool = False, kernel: int = 3, stride: int = 2,
                  padding: int = 1) -> int:
    """Per-sample forward FLOPs of an Encoder + linear head (see module docs)."""
    c_in, h, w = config.input_shape
    total = 0
    for c_out in config.channels:
        h, w = conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding)
        hw = h * w
        total += conv_flops(c_in, c_out, kernel, h, w)
        total += (2 * 4 + 3 if abri else 4) * c_out * hw
        total += c_out * hw                                    # ReLU
        if config.residual_connections and c_in <= c_out:
            total += c_out * hw
        c_in = c_out
    total += c_in * h * w                                      # GAP
    total += 2 * c_in * config.n_classes + config.n_classes    # head
    return int(total)


def estimate_epoch_flops(config: ModelConfig, dataset_size: int, batch_size: int = 32,
                         abri: bool = False) -> int:
    """Training FLOPs of one epoch: 3 x forward per sample (batching does not change the count)."""
    if dataset_size < 1 or batch_size < 1:
        raise ContractError("dataset_size and batch_size must be positive")
    return 3 * forward_flops(config, abri) * int(dataset_size)


# ---------------------------------------------------------------- export

def export_report(report: ChannelHealthReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_json(), indent=2))
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["name", "channels", "abnormal_ratio", "n_dead"])
                for l in report.layers:
                    w.writerow([l.name, l.channels, repr(l.abnormal_ratio), len(l.dead_ids)])
        else:
            raise ContractError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path) -> ChannelHealthReport:
    return ChannelHealthReport.from_json(json.loads(Path(path).read_text()))


def export_flops(ledger: FlopsLedger, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "flops_per_epoch", "epochs", "total"])
        for p in ledger.phases:
            w.writerow([p.name, repr(p.flops_per_epoch), repr(p.epochs), repr(p.total)])
    return path


def flops_ledger_from_json(doc: dict) -> FlopsLedger:
    """``{"phases": {name: {"flops_per_epoch", "epochs"}}, "reference": [...], "comparison": [...]}``."""
    phases = {k: (v["flops_per_epoch"], v["epochs"]) if isinstance(v, dict) else tuple(v)
              for k, v in doc["phases"].items()}
    return count_flops(phases, doc["reference"], doc["comparison"])
