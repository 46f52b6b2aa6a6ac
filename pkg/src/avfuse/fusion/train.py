"""Supervised training loops shared by every strategy.

Batch order is drawn from an RNG keyed by ``(seed, stage, epoch)`` so that a
run is bit-reproducible and independent of how many draws other stages made.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from avfuse.errors import NonFiniteError
from avfuse.numerics import functional as F
from avfuse.numerics.metrics import compute_metrics
from avfuse.numerics.nn import Module
from avfuse.numerics.optim import OptimizerState, sgd_step
from avfuse.numerics.tensor import Tensor, no_grad

STAGE_KEYS = {"stage1-a": 11, "stage1-v": 12, "stage2": 13, "joint": 14, "pretrain": 15,
              "finetune": 16, "probe": 17}


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32

    def state(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.weight_decay)


@dataclass
class EpochResult:
    loss: float
    accuracy: float
    confidence: np.ndarray  # per training sample, dataset order
    probs: np.ndarray       # training-mode softmax, dataset order


def batch_order(n: int, batch_size: int, seed: int, stage: str, epoch: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, STAGE_KEYS.get(stage, 99), epoch])
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def run_epoch(model: Module, inputs: list[np.ndarray], labels: np.ndarray, opt: OptimizerState,
              cfg: OptimConfig, seed: int, stage: str, epoch: int,
              lr_scale: dict[str, float] | None = None,
              transform: Callable[[np.ndarray, list[np.ndarray]], list[np.ndarray]] | None = None,
              ) -> EpochResult:
    """One pass of momentum SGD; records the true-class confidence of every sample.

    ``transform(batch_index, batch_inputs)`` may rewrite inputs (masking).
    """
    model.train()
    params = dict(model.named_parameters())
    n = len(labels)
    confidence = np.empty(n)
    probs = None
    total_loss = 0.0
    correct = 0
    for b, idx in enumerate(batch_order(n, cfg.batch_size, seed, stage, epoch)):
        batch = [x[idx] for x in inputs]
        if transform is not None:
            batch = transform(idx, batch)
        model.zero_grad()
        logits = model(*[Tensor(x) for x in batch])
        loss, conf = F.cross_entropy_confidence(logits, labels[idx])
        if not math.isfinite(loss.item()):
            raise NonFiniteError(f"non-finite loss at {stage} epoch {epoch} batch {b}")
        loss.backward()
        sgd_step(params, opt, lr_scale)
        confidence[idx] = conf
        if probs is None:
            probs = np.empty((n, logits.shape[1]))
        probs[idx] = F.softmax(logits.data)
        total_loss += loss.item() * len(idx)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
    return EpochResult(total_loss / n, correct / n, confidence, probs)


def predict(model: Module, inputs: list[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Eval-mode softmax probabilities."""
    was_training = model.training
    model.eval()
    n = len(inputs[0])
    out = []
    with no_grad():
        for i in range(0, n, batch_size):
            out.append(F.softmax(model(*[Tensor(x[i:i + batch_size]) for x in inputs]).data))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate_probs(probs: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    n = len(labels)
    p = np.clip(probs[np.arange(n), labels], 1e-300, None)
    m = compute_metrics(probs, labels)
    return {"loss": float(-np.mean(np.log(p))), "accuracy": m.accuracy, "map": m.mAP}


def evaluate(model: Module, inputs: list[np.ndarray], labels: np.ndarray) -> dict[str, float]:
    return evaluate_probs(predict(model, inputs), labels)
