"""Per-sample, per-modality confidence history from stage-1 training."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from avfuse.errors import ContractError

MODALITIES = ("a", "v")
# keep recorded values strictly inside (0, 1) even when softmax saturates
_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


class ConfidenceLedger:
    """Append-only record of true-class confidences.

    ``record`` appends one value per sample; ``finalize`` computes the means
    and freezes the ledger.
    """

    def __init__(self, sample_ids=()):
        self.sample_ids = [int(i) for i in sample_ids]
        self._conf: dict[str, dict[int, list[float]]] = {m: {} for m in MODALITIES}
        self._means: dict[str, dict[int, float]] | None = None

    @property
    def finalized(self) -> bool:
        return self._means is not None

    def record(self, modality: str, ids, confidences) -> None:
        if self.finalized:
            raise ContractError("ledger is finalized and read-only")
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality {modality!r}")
        ids = np.asarray(ids).ravel()
        conf = np.clip(np.asarray(confidences, dtype=np.float64).ravel(), _LO, _HI)
        if ids.shape != conf.shape:
            raise ContractError(f"{len(ids)} ids but {len(conf)} confidences")
        book = self._conf[modality]
        for i, c in zip(ids.tolist(), conf.tolist()):
            book.setdefault(int(i), []).append(float(c))

    def history(self, modality: str, sample_id: int) -> list[float]:
        return list(self._conf[modality].get(int(sample_id), []))

    def n_recorded(self, modality: str) -> int:
        return sum(len(v) for v in self._conf[modality].values())

    def finalize(self) -> "ConfidenceLedger":
        ids = self.sample_ids or sorted(set(self._conf["a"]) | set(self._conf["v"]))
        gaps = [(i, m) for i in ids for m in MODALITIES if not self._conf[m].get(i)]
        if gaps:
            shown = ", ".join(f"{i}/{m}" for i, m in gaps[:10])
            more = f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""
            raise ContractError(f"ledger has no confidences for sample/modality {shown}{more}")
        self.sample_ids = list(ids)
        self._means = {m: {i: float(np.mean(self._conf[m][i])) for i in ids} for m in MODALITIES}
        return self

    def mean(self, modality: str, sample_id: int) -> float:
        if self._means is None:
            raise ContractError("ledger is not finalized")
        try:
            return self._means[modality][int(sample_id)]
        except KeyError:
            raise ContractError(f"ledger has no sample {int(sample_id)}") from None

    def means(self, modality: str, ids) -> np.ndarray:
        return np.array([self.mean(modality, i) for i in np.asarray(ids).tolist()])

    def to_json(self) -> dict:
        samples = []
        for i in self.sample_ids or sorted(self._conf["a"]):
            row = {"id": int(i), "conf_a": self.history("a", i), "conf_v": self.history("v", i)}
            if self._means is not None:
                row["mean_a"] = self._means["a"][i]
                row["mean_v"] = self._means["v"][i]
            samples.append(row)
        return {"samples": samples}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, doc: dict) -> "ConfidenceLedger":
        ledger = cls([s["id"] for s in doc["samples"]])
        for s in doc["samples"]:
            ledger._conf["a"][int(s["id"])] = [float(c) for c in s["conf_a"]]
            ledger._conf["v"][int(s["id"])] = [float(c) for c in s["conf_v"]]
        if doc["samples"] and all("mean_a" in s for s in doc["samples"]):
            ledger.finalize()
        return ledger

    @classmethod
    def load(cls, path) -> "ConfidenceLedger":
        return cls.from_json(json.loads(Path(path).read_text()))


def finalize_ledger(ledger: ConfidenceLedger) -> ConfidenceLedger:
    return ledger.finalize()
