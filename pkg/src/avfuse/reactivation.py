"""Pre-training, cross-modal fine-tuning and the dead-channel reactivation experiment.

The experiment: pre-train a uni-modal classifier on modality ``a``, inject
abnormal (gamma, beta) pairs, then fine-tune on modality ``v`` with and
without ABRi and compare dead-channel counts and test accuracy.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from avfuse.data.synthetic import Splits, SyntheticSpec, generate_synthetic
from avfuse.diagnostics import detect_dead_channels, inject_abnormal
from avfuse.errors import ContractError
from avfuse.fusion.strategies import _row
from avfuse.fusion.train import OptimConfig, evaluate, evaluate_probs, predict, run_epoch
from avfuse.models import Classifier, ModelConfig, adapt_input_channels, wrap_abri
from avfuse.numerics.nn import Linear

HEAD_KEY = 77


def train_classifier(model: Classifier, data: Splits, modality: str, epochs: int, cfg: OptimConfig,
                     seed: int, stage: str, rows: list | None = None, run_id: str = "run") -> Classifier:
    """Plain supervised training; appends train/val rows per epoch and a final test row."""
    x = [data.train.modality(modality)]
    opt = cfg.state()
    for epoch in range(epochs):
        res = run_epoch(model, x, data.train.labels, opt, cfg, seed, stage, epoch)
        if rows is not None:
            rows.append(_row(run_id, stage, stage, epoch, "train", evaluate_probs(res.probs, data.train.labels)))
            rows.append(_row(run_id, stage, stage, epoch, "val",
                             evaluate(model, [data.val.modality(modality)], data.val.labels)))
    if rows is not None:
        rows.append(_row(run_id, stage, stage, epochs - 1, "test",
                         evaluate(model, [data.test.modality(modality)], data.test.labels)))
    return model


def prepare_finetune(model: Classifier, in_shape: tuple[int, ...], n_classes: int, seed: int,
                     abri: bool = False, init_alpha: float = 0.5, new_head: bool = True,
                     cross_modal: bool = False) -> Classifier:
    """Copy of ``model`` ready for fine-tuning on inputs of shape ``in_shape``.

    A differing channel count needs ``cross_modal``; the first conv is then
    resized.  ``new_head`` swaps in a freshly initialised linear head.
    """
    model = copy.deepcopy(model)
    cfg = model.encoder.config
    if in_shape[0] != cfg.input_shape[0]:
        if not cross_modal:
            raise ContractError(f"checkpoint expects {cfg.input_shape[0]} input channels, data has {in_shape[0]}; "
                                "use cross-modal fine-tuning to adapt the input layer")
        adapt_input_channels(model.encoder, in_shape[0])
    model.encoder.config.input_shape = tuple(in_shape)
    if new_head or n_classes != model.config.n_classes:
        model.head = Linear(model.encoder.feature_dim, n_classes, rng=np.random.default_rng([seed, HEAD_KEY]))
    model.config = ModelConfig(**{**model.config.__dict__, "input_shape": tuple(in_shape), "n_classes": n_classes})
    if abri:
        wrap_abri(model, init_alpha)
    return model


def count_dead(model, probes: np.ndarray, dead_fraction: float = 0.99, activation_tol: float = 1e-6) -> int:
    return sum(len(v) for v in detect_dead_channels(model, probes, None, dead_fraction, activation_tol).values())


@dataclass
class ReactivationSettings:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    snr_pretrain: float = 3.0
    snr_finetune: float = 1.5
    pretrain_epochs: int = 20
    finetune_epochs: int = 20
    pretrain_lr: float = 0.05
    finetune_lr: float = 0.01
    inject_fraction: float = 0.5
    init_alpha: float = 0.5
    probe_samples: int = 256
    samples_per_class: dict[str, int] = field(default_factory=lambda: {"train": 90, "val": 10, "test": 30})


def reactivation_trial(seed: int, s: ReactivationSettings | None = None) -> dict:
    """One seed: dead counts and test accuracy after vanilla and ABRi fine-tuning."""
    s = s or ReactivationSettings()
    data = generate_synthetic(SyntheticSpec(samples_per_class=s.samples_per_class, snr_a=s.snr_pretrain,
                                            snr_v=s.snr_finetune, seed=seed))
    k = data.train.n_classes
    base = Classifier(ModelConfig(input_shape=data.train.x_a.shape[1:], channels=s.channels, n_classes=k),
                      seed=seed)
    train_classifier(base, data, "a", s.pretrain_epochs, OptimConfig(lr=s.pretrain_lr), seed, "pretrain")
    sick, provenance = inject_abnormal(base, s.inject_fraction, seed=seed)
    probes = data.train.x_v[:s.probe_samples]
    out = {"seed": seed, "injected": sum(len(p["channels"]) for p in provenance)}
    for name, abri in (("vanilla", False), ("abri", True)):
        m = prepare_finetune(sick, data.train.x_v.shape[1:], k, seed, abri=abri, init_alpha=s.init_alpha,
                             cross_modal=True)
        train_classifier(m, data, "v", s.finetune_epochs, OptimConfig(lr=s.finetune_lr), seed, "finetune")
        out[f"{name}_dead"] = count_dead(m, probes)
        out[f"{name}_acc"] = float(np.mean(np.argmax(predict(m, [data.test.x_v]), 1) == data.test.labels))
    return out
