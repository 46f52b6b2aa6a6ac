"""Dataset directories: one JSON index per split plus raw float32 blobs.

Layout::

    <dir>/spec.json
    <dir>/<split>.json        {"n", "ids", "labels", "blobs": {"a": {...}, "v": {...}}}
    <dir>/<split>_<m>.bin     little-endian float32, sample-major

Each blob entry records ``file``, ``shape`` and the SHA-256 of the bytes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from avfuse.data.synthetic import MODALITIES, SPLITS, MultiModalDataset, Splits, SyntheticSpec
from avfuse.errors import ChecksumError, ContractError

_DTYPE = np.dtype("<f4")


def export_dataset(data: Splits, directory, spec: SyntheticSpec | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if spec is not None:
        (directory / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1))
    for split, ds in zip(SPLITS, data):
        index = {"n": len(ds), "ids": ds.ids.tolist(), "labels": ds.labels.tolist(), "blobs": {}}
        for m in MODALITIES:
            raw = np.ascontiguousarray(ds.modality(m), dtype=_DTYPE).tobytes()
            name = f"{split}_{m}.bin"
            (directory / name).write_bytes(raw)
            index["blobs"][m] = {"file": name, "shape": list(ds.modality(m).shape),
                                 "sha256": hashlib.sha256(raw).hexdigest()}
        (directory / f"{split}.json").write_text(json.dumps(index, sort_keys=True))
    return directory


def import_dataset(directory) -> Splits:
    """Load an exported directory; tensors come back as float64."""
    directory = Path(directory)
    parts = []
    for split in SPLITS:
        path = directory / f"{split}.json"
        if not path.exists():
            raise ContractError(f"dataset directory {directory} has no {split}.json")
        index = json.loads(path.read_text())
        arrays = {}
        for m in MODALITIES:
            blob = index["blobs"][m]
            raw = (directory / blob["file"]).read_bytes()
            shape = tuple(blob["shape"])
            if len(raw) != int(np.prod(shape)) * _DTYPE.itemsize:
                raise ChecksumError(f"{blob['file']}: {len(raw)} bytes, expected "
                                    f"{int(np.prod(shape)) * _DTYPE.itemsize} for shape {shape}")
            if hashlib.sha256(raw).hexdigest() != blob["sha256"]:
                raise ChecksumError(f"{blob['file']}: checksum mismatch")
            arrays[m] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(np.float64)
        parts.append(MultiModalDataset(np.asarray(index["ids"], dtype=np.int64), arrays["a"], arrays["v"],
                                       np.asarray(index["labels"], dtype=np.int64)))
    return Splits(*parts)
