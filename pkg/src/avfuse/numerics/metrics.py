"""Classification accuracy and one-vs-rest mean average precision."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from avfuse.errors import ContractError


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    mAP: float
    excluded_classes: tuple[int, ...] = field(default=())

    @property
    def warning(self) -> bool:
        return bool(self.excluded_classes)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP of a ranking; tied scores are resolved as one threshold step."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positives[order].astype(np.float64)
    tp = np.cumsum(pos)
    # evaluate precision only at the last index of each run of tied scores
    last = np.r_[s[1:] != s[:-1], True]
    tp_at = tp[last]
    n_at = (np.flatnonzero(last) + 1).astype(np.float64)
    precision = tp_at / n_at
    recall_gain = np.diff(np.r_[0.0, tp_at]) / pos.sum()
    return float(np.sum(precision * recall_gain))


def compute_metrics(probabilities, labels) -> Metrics:
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ContractError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ContractError("probability rows must sum to 1 within 1e-6")
    # np.argmax returns the first maximal index: ties go to the lowest class
    accuracy = float(np.mean(np.argmax(probs, axis=1) == labels)) if labels.size else 0.0
    aps, excluded = [], []
    for c in range(probs.shape[1]):
        pos = labels == c
        if not pos.any():
            excluded.append(c)
            continue
        aps.append(average_precision(probs[:, c], pos))
    m_ap = float(np.mean(aps)) if aps else float("nan")
    return Metrics(accuracy, m_ap, tuple(excluded))
