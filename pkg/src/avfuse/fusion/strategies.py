"""Fusion Tuning (two stages) and the baselines it is compared against.

Strategies:

* ``JT``        one-stage joint training of the full multimodal model
* ``DF``        two uni-modal models, softmax scores averaged at test time
* ``FusT*``     stage 1 per modality, then joint stage 2 without masking
* ``FusT*-lr``  as FusT*, but the stronger encoder trains at ``lr * lr_scale``
* ``FusT-mean`` stage 2 masks every sample at the modality-mean ratio
* ``FusT``      stage 2 masks each sample at its own ratio
"""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avfuse.data.checkpoint import save_checkpoint
from avfuse.data.synthetic import MultiModalDataset, Splits
from avfuse.errors import ContractError
from avfuse.fusion.ledger import MODALITIES, ConfidenceLedger
from avfuse.fusion.masking import MaskingPolicy, apply_mask, mask_rng, masking_ratios
from avfuse.fusion.train import OptimConfig, evaluate_probs, predict, run_epoch
from avfuse.models import Classifier, Encoder, ModelConfig, MultiModalNet, wrap_abri

STRATEGIES = ("FusT", "FusT*", "FusT*-lr", "FusT-mean", "JT", "DF")
ABRI_TARGETS = ("none", "a", "v", "both")
METRIC_COLUMNS = ("run_id", "strategy", "stage", "epoch", "split", "loss", "accuracy", "map")


@dataclass
class StagePlan:
    strategy: str = "FusT"
    stage1_epochs_a: int = 20
    stage1_epochs_v: int = 20
    stage2_epochs: int = 20
    joint_epochs: int = 40
    lr: float = 0.05
    stage2_lr: float = 0.01
    lr_scale: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    abri_target: str = "none"
    confidence_mode: str = "train"   # or "eval": extra inference sweep per epoch
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.abri_target not in ABRI_TARGETS:
            raise ContractError(f"abri_target must be one of {ABRI_TARGETS}, got {self.abri_target!r}")
        if self.confidence_mode not in ("train", "eval"):
            raise ContractError(f"confidence_mode must be 'train' or 'eval', got {self.confidence_mode!r}")
        needed = {
            "JT": ("joint_epochs",),
            "DF": ("stage1_epochs_a", "stage1_epochs_v"),
        }.get(self.strategy, ("stage1_epochs_a", "stage1_epochs_v", "stage2_epochs"))
        for name in needed:
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1 for strategy {self.strategy}")
        if self.lr_scale <= 0:
            raise ContractError(f"lr_scale must be > 0, got {self.lr_scale}")

    def optim(self, stage: str) -> OptimConfig:
        lr = self.stage2_lr if stage == "stage2" else self.lr
        return OptimConfig(lr, self.momentum, self.weight_decay, self.batch_size)


@dataclass
class StrategyResult:
    strategy: str
    rows: list[dict]
    test: dict[str, float]
    model: object
    encoders: dict[str, Encoder]
    ledger: ConfidenceLedger | None = None
    stage1: dict[str, Classifier] = field(default_factory=dict)


def _row(run_id, strategy, stage, epoch, split, m) -> dict:
    return {"run_id": run_id, "strategy": strategy, "stage": stage, "epoch": epoch, "split": split,
            "loss": m["loss"], "accuracy": m["accuracy"], "map": m["map"]}


def write_metrics(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in METRIC_COLUMNS])
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("loss", "accuracy", "map"):
            r[k] = float(r[k])
    return rows


def stage1_train(modality: str, model: Classifier, data: Splits, epochs: int, cfg: OptimConfig,
                 seed: int, ledger: ConfidenceLedger | None = None, confidence_mode: str = "train",
                 rows: list | None = None, run_id: str = "run", strategy: str = "",
                 checkpoint: str | Path | None = None) -> Classifier:
    """Uni-modal supervised training; every epoch adds one confidence per sample to ``ledger``."""
    train = data.train
    if model.config.n_classes <= int(train.labels.max()):
        raise ContractError(f"head has {model.config.n_classes} outputs, labels reach {int(train.labels.max())}")
    opt = cfg.state()
    stage = f"stage1-{modality}"
    x = [train.modality(modality)]
    for epoch in range(epochs):
        res = run_epoch(model, x, train.labels, opt, cfg, seed, stage, epoch)
        if ledger is not None:
            if confidence_mode == "eval":
                p = predict(model, x)
                conf = p[np.arange(len(train)), train.labels]
            else:
                conf = res.confidence
            ledger.record(modality, train.ids, conf)
        if rows is not None:
            rows.append(_row(run_id, strategy, stage, epoch, "train", evaluate_probs(res.probs, train.labels)))
            rows.append(_row(run_id, strategy, stage, epoch, "val",
                             evaluate_probs(predict(model, [data.val.modality(modality)]), data.val.labels)))
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, {"stage": stage, "seed": seed})
    return model


def sample_ratios(ledger: ConfidenceLedger, ids, policy: MaskingPolicy, mode: str = "sample"):
    """Per-sample mask ratios (m_a, m_v) for stage 2; ``mode='mean'`` makes them uniform."""
    m_a, m_v = masking_ratios(ledger.means("a", ids), ledger.means("v", ids), policy)
    if mode == "mean":
        m_a = np.full_like(m_a, np.mean(m_a))
        m_v = np.full_like(m_v, np.mean(m_v))
    elif mode != "sample":
        raise ContractError(f"unknown ratio mode {mode!r}")
    return m_a, m_v


def _mask_transform(train: MultiModalDataset, ratios: dict[str, np.ndarray], policy: MaskingPolicy,
                    seed: int, epoch: int):
    key_epoch = epoch if policy.resample_per_epoch else 0

    def transform(idx, batch):
        out = []
        for m, x in zip(MODALITIES, batch):
            r = ratios[m][idx]
            if not np.any(r > 0):
                out.append(x)
                continue
            x = x.copy()
            for j, (i, ratio) in enumerate(zip(idx, r)):
                if ratio > 0:
                    rng = mask_rng(seed, int(train.ids[i]), key_epoch, m)
                    x[j] = apply_mask(x[j], policy.kind(m), float(ratio), rng,
                                      policy.patch_size, policy.stripe_width)
            out.append(x)
        return out

    return transform


def stronger_modality(ledger: ConfidenceLedger) -> str:
    """Modality with the higher mean final-epoch stage-1 confidence (ties: ``a``)."""
    final = {m: np.mean([ledger.history(m, i)[-1] for i in ledger.sample_ids]) for m in MODALITIES}
    return "v" if final["v"] > final["a"] else "a"


def stage2_train(encoder_a: Encoder, encoder_v: Encoder, data: Splits, policy: MaskingPolicy | None,
                 ledger: ConfidenceLedger | None, epochs: int, cfg: OptimConfig, seed: int,
                 mode: str = "sample", lr_scale: dict[str, float] | None = None,
                 rows: list | None = None, run_id: str = "run", strategy: str = "",
                 stage: str = "stage2") -> MultiModalNet:
    """Joint training of both encoders and a fresh concatenation head.

    ``mode`` is ``sample`` (per-sample masks), ``mean`` (uniform masks) or
    ``none``.  Validation and test inputs are never masked.
    """
    train = data.train
    n_classes = int(max(data.train.labels.max(), data.test.labels.max())) + 1
    model = MultiModalNet(encoder_a, encoder_v, n_classes, seed=seed)
    ratios = None
    if mode != "none":
        if ledger is None or not ledger.finalized:
            raise ContractError("stage 2 masking needs a finalized ledger")
        if policy is None:
            raise ContractError("stage 2 masking needs a policy")
        m_a, m_v = sample_ratios(ledger, train.ids, policy, mode)
        ratios = {"a": m_a, "v": m_v}
    opt = cfg.state()
    x = [train.x_a, train.x_v]
    for epoch in range(epochs):
        tf = _mask_transform(train, ratios, policy, seed, epoch) if ratios is not None else None
        res = run_epoch(model, x, train.labels, opt, cfg, seed, stage, epoch, lr_scale, tf)
        if rows is not None:
            rows.append(_row(run_id, strategy, stage, epoch, "train", evaluate_probs(res.probs, train.labels)))
            rows.append(_row(run_id, strategy, stage, epoch, "val",
                             evaluate_probs(predict(model, [data.val.x_a, data.val.x_v]), data.val.labels)))
    return model


def init_encoders(configs: dict[str, ModelConfig], seed: int, abri_target: str = "none",
                  init: dict[str, Encoder] | None = None) -> dict[str, Encoder]:
    """Seeded fresh encoders (or deep copies of ``init``), ABRi-wrapped per target."""
    encoders = {}
    for k, m in enumerate(MODALITIES):
        if init and m in init:
            encoders[m] = copy.deepcopy(init[m])
        else:
            encoders[m] = Encoder(configs[m], np.random.default_rng([seed, 21 + k]))
        if abri_target in (m, "both"):
            wrap_abri(encoders[m])
    return encoders


def default_configs(data: Splits, n_classes: int | None = None) -> dict[str, ModelConfig]:
    k = n_classes or int(data.train.labels.max()) + 1
    return {
        "a": ModelConfig(input_shape=data.train.x_a.shape[1:], n_classes=k),
        "v": ModelConfig(input_shape=data.train.x_v.shape[1:], n_classes=k),
    }


def run_strategy(plan: StagePlan, data: Splits, policy: MaskingPolicy | None = None,
                 configs: dict[str, ModelConfig] | None = None, init: dict[str, Encoder] | None = None,
                 run_id: str = "run", checkpoint_dir: str | Path | None = None) -> StrategyResult:
    policy = policy or MaskingPolicy()
    configs = configs or default_configs(data)
    s = plan.strategy
    rows: list[dict] = []
    enc = init_encoders(configs, plan.seed, plan.abri_target, init)
    test_x = [data.test.x_a, data.test.x_v]

    if s == "JT":
        model = stage2_train(enc["a"], enc["v"], data, None, None, plan.joint_epochs, plan.optim("joint"),
                             plan.seed, mode="none", rows=rows, run_id=run_id, strategy=s, stage="joint")
        test = evaluate_probs(predict(model, test_x), data.test.labels)
        rows.append(_row(run_id, s, "joint", plan.joint_epochs - 1, "test", test))
        return StrategyResult(s, rows, test, model, enc)

    ledger = ConfidenceLedger(data.train.ids)
    stage1 = {}
    for k, m in enumerate(MODALITIES):
        clf = Classifier(configs[m], seed=plan.seed * 1000 + 31 + k, encoder=enc[m])
        ckpt = Path(checkpoint_dir) / f"stage1_{m}.ckpt" if checkpoint_dir else None
        epochs = plan.stage1_epochs_a if m == "a" else plan.stage1_epochs_v
        stage1[m] = stage1_train(m, clf, data, epochs, plan.optim(f"stage1-{m}"), plan.seed, ledger,
                                 plan.confidence_mode, rows, run_id, s, ckpt)
    ledger.finalize()

    if s == "DF":
        probs = 0.5 * (predict(stage1["a"], [data.test.x_a]) + predict(stage1["v"], [data.test.x_v]))
        test = evaluate_probs(probs, data.test.labels)
        rows.append(_row(run_id, s, "df", 0, "test", test))
        return StrategyResult(s, rows, test, stage1, enc, ledger, stage1)

    mode = {"FusT": "sample", "FusT-mean": "mean"}.get(s, "none")
    lr_scale = None
    if s == "FusT*-lr":
        strong = stronger_modality(ledger)
        lr_scale = {f"encoder_{strong}.{name}": plan.lr_scale for name, _ in enc[strong].named_parameters()}
    # stage 2 trains copies so the stage-1 models stay inspectable
    enc2 = {m: copy.deepcopy(stage1[m].encoder) for m in MODALITIES}
    model = stage2_train(enc2["a"], enc2["v"], data, policy, ledger, plan.stage2_epochs, plan.optim("stage2"),
                         plan.seed, mode, lr_scale, rows, run_id, s)
    test = evaluate_probs(predict(model, test_x), data.test.labels)
    rows.append(_row(run_id, s, "stage2", plan.stage2_epochs - 1, "test", test))
    return StrategyResult(s, rows, test, model, enc2, ledger, stage1)
