"""Binary checkpoint format.

Layout::

    b"ABRICKPT" | u32 LE header length | JSON header | float32 LE payload

The header is ``{"version", "tensors": [{"name", "shape", "tag"}], "checksum",
"meta"}``.  Tensor order in the header is payload order.  The checksum is the
SHA-256 hex digest of the payload.  The JSON is written with sorted keys and
fixed separators so that save -> load -> save is byte-identical.

Parameters live in float64 and are narrowed to float32 on save, so the first
save loses at most 2**-24 relative precision per entry; later round trips are
exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avfuse.batchnorm import ABRiLayer
from avfuse.errors import ChecksumError, ContractError
from avfuse.models import build_model, describe
from avfuse.numerics.nn import Module

MAGIC = b"ABRICKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    tags: dict[str, str]
    meta: dict = field(default_factory=dict)

    @property
    def abri_blocks(self) -> set[str]:
        """Names of blocks whose norm layer is ABRi-wrapped."""
        return {n.split(".norm.")[0] for n, t in self.tags.items() if t == "abri"}


def _tag_for(name: str, owner: Module, model: Module) -> str:
    if isinstance(owner, ABRiLayer) or ".bn_ori." in name or ".bn_add." in name:
        return "abri"
    return owner.tag


def encode(tensors: "OrderedDict[str, np.ndarray]", tags: dict[str, str], meta: dict | None = None) -> bytes:
    chunks = []
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "tag": tags[name]})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "tensors": entries,
        "checksum": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def decode(raw: bytes, verify: bool = True) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise ContractError(f"bad magic: found {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise ChecksumError(f"file is {len(raw)} bytes, too short for a header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ChecksumError(f"header claims {hlen} bytes, only {len(raw) - 12} present")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ContractError(f"unsupported version: found {header.get('version')}, expected {VERSION}")
    payload = raw[12 + hlen:]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"]]
    expected = sum(sizes) * _DTYPE.itemsize
    if len(payload) != expected:
        raise ChecksumError(f"payload length {len(payload)} bytes, manifest requires {expected}")
    if verify and hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ChecksumError("payload checksum mismatch")
    flat = np.frombuffer(payload, dtype=_DTYPE)
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    tags = {}
    offset = 0
    for entry, n in zip(header["tensors"], sizes):
        tensors[entry["name"]] = flat[offset:offset + n].astype(np.float64).reshape(entry["shape"])
        tags[entry["name"]] = entry["tag"]
        offset += n
    return Checkpoint(tensors, tags, header.get("meta", {}))


def model_tensors(model: Module) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    tags = {}
    for name, value, owner in model.named_state():
        tensors[name] = np.asarray(value)
        tags[name] = _tag_for(name, owner, model)
    return tensors, tags


def save_checkpoint(model: Module, path, meta: dict | None = None) -> Path:
    """Write ``model`` (parameters and buffers) to ``path``; architecture goes in meta."""
    tensors, tags = model_tensors(model)
    full_meta = {"model": describe(model)}
    full_meta.update(meta or {})
    path = Path(path)
    path.write_bytes(encode(tensors, tags, full_meta))
    return path


def read_checkpoint(path, verify: bool = True) -> Checkpoint:
    return decode(Path(path).read_bytes(), verify=verify)


def load_checkpoint(path, verify: bool = True) -> Module:
    """Rebuild the saved model, ABRi wrappers included."""
    ckpt = read_checkpoint(path, verify=verify)
    return model_from_checkpoint(ckpt)


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    if "model" not in ckpt.meta:
        raise ContractError("checkpoint meta has no model description")
    model = build_model(ckpt.meta["model"], ckpt.abri_blocks)
    model.load_state_dict(ckpt.tensors)
    return model
