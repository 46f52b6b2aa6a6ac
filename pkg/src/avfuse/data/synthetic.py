"""Paired two-modality synthetic classification data.

Modality ``a`` is spectrogram-like (1 x F x T): class ``c`` is a set of
horizontal frequency stripes, a cosine along the frequency axis that is
constant over time.  Modality ``v`` is image-like (1 x H x W): class ``c`` is a
separable 2-D cosine pattern whose vertical frequency is the class's stripe
frequency in ``a``, so the two modalities share class structure and an
encoder trained on one transfers partially to the other.  Within a modality the class templates are
orthonormal (unit L2 norm over the whole tensor), so a sample is
``snr * template + noise`` with unit-variance Gaussian noise and ``snr`` is
the matched-filter signal-to-noise ratio of the class signal.

Every random draw is keyed, never sequential: templates depend on
``(seed, class)`` and noise on ``(seed, sample_id, modality)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from avfuse.errors import ContractError

SPLITS = ("train", "val", "test")
MODALITIES = ("a", "v")
_MOD_CODE = {"a": 0, "v": 1}
_TEMPLATE_KEY = 7001
_NOISE_KEY = 7002


@dataclass
class SyntheticSpec:
    n_classes: int = 6
    samples_per_class: dict[str, int] = field(default_factory=lambda: {"train": 90, "val": 10, "test": 30})
    shape_a: tuple[int, int, int] = (1, 8, 8)
    shape_v: tuple[int, int, int] = (1, 8, 8)
    snr_a: float = 3.0
    snr_v: float = 0.7
    seed: int = 0

    def __post_init__(self):
        self.shape_a = tuple(int(s) for s in self.shape_a)
        self.shape_v = tuple(int(s) for s in self.shape_v)
        self.samples_per_class = {k: int(v) for k, v in self.samples_per_class.items()}
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")
        if set(self.samples_per_class) != set(SPLITS):
            raise ContractError(f"samples_per_class needs keys {SPLITS}, got {sorted(self.samples_per_class)}")
        if min(self.samples_per_class.values()) < 1:
            raise ContractError("all per-class sample counts must be >= 1")
        if self.snr_a <= 0 or self.snr_v <= 0:
            raise ContractError(f"snr values must be > 0, got a={self.snr_a}, v={self.snr_v}")
        for name, shape in (("shape_a", self.shape_a), ("shape_v", self.shape_v)):
            if len(shape) != 3 or min(shape) < 1:
                raise ContractError(f"{name} must be (C, H, W), got {shape}")
        if self.n_classes > min(self.shape_a[1], self.shape_v[1]) - 1:
            raise ContractError(
                f"n_classes={self.n_classes} needs F and H of at least {self.n_classes + 1}"
            )


@dataclass(frozen=True)
class MultiModalSample:
    sample_id: int
    tensor_a: np.ndarray
    tensor_v: np.ndarray
    label: int


@dataclass
class MultiModalDataset:
    """Column-oriented storage; indexing yields :class:`MultiModalSample`."""

    ids: np.ndarray
    x_a: np.ndarray
    x_v: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.x_a) == len(self.x_v) == len(self.labels) == n):
            raise ContractError("dataset columns differ in length")
        if len(np.unique(self.ids)) != n:
            raise ContractError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> MultiModalSample:
        return MultiModalSample(int(self.ids[i]), self.x_a[i], self.x_v[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[MultiModalSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "MultiModalDataset":
        index = np.asarray(index, dtype=np.int64)
        return MultiModalDataset(self.ids[index], self.x_a[index], self.x_v[index], self.labels[index])

    def modality(self, name: str) -> np.ndarray:
        if name not in _MOD_CODE:
            raise ContractError(f"unknown modality {name!r}")
        return self.x_a if name == "a" else self.x_v

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @classmethod
    def concat(cls, parts: list["MultiModalDataset"]) -> "MultiModalDataset":
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.x_a for p in parts]),
            np.concatenate([p.x_v for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


class Splits(NamedTuple):
    train: MultiModalDataset
    val: MultiModalDataset
    test: MultiModalDataset


def _frequency_table(seed: int, n_candidates: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _TEMPLATE_KEY])
    return rng.permutation(n_candidates)


def class_frequency(spec: SyntheticSpec, cls: int) -> int:
    """Stripe frequency of ``cls``: distinct per class, in 1 .. min(F, H) - 1."""
    return 1 + int(_frequency_table(spec.seed, min(spec.shape_a[1], spec.shape_v[1]) - 1)[cls])


def template_a(spec: SyntheticSpec, cls: int) -> np.ndarray:
    """Unit-norm frequency-stripe template for class ``cls``."""
    c, f, t = spec.shape_a
    k = class_frequency(spec, cls)
    rows = np.cos(np.pi * k * (np.arange(f) + 0.5) / f)
    tmpl = np.broadcast_to(rows[None, :, None], (c, f, t))
    return tmpl / np.linalg.norm(tmpl)


def template_v(spec: SyntheticSpec, cls: int) -> np.ndarray:
    """Unit-norm separable 2-D cosine template for class ``cls``."""
    c, h, w = spec.shape_v
    # distinct ky keeps the templates orthogonal whatever kx is
    ky = class_frequency(spec, cls)
    kx = int(_frequency_table(spec.seed + 1, w)[cls % w])
    col = np.cos(np.pi * ky * (np.arange(h) + 0.5) / h)
    row = np.cos(np.pi * kx * (np.arange(w) + 0.5) / w)
    pattern = np.outer(col, row)
    tmpl = np.broadcast_to(pattern[None], (c, h, w))
    return tmpl / np.linalg.norm(tmpl)


def _templates(spec: SyntheticSpec, modality: str) -> list[np.ndarray]:
    fn = template_a if modality == "a" else template_v
    return [fn(spec, c) for c in range(spec.n_classes)]


def _draw(spec: SyntheticSpec, sample_id: int, modality: str, tmpl: np.ndarray) -> np.ndarray:
    snr = spec.snr_a if modality == "a" else spec.snr_v
    rng = np.random.default_rng([spec.seed, int(sample_id), _MOD_CODE[modality], _NOISE_KEY])
    return snr * tmpl + rng.standard_normal(tmpl.shape)


def make_sample(spec: SyntheticSpec, sample_id: int, cls: int, modality: str) -> np.ndarray:
    """One modality tensor; depends only on (seed, sample_id, modality, class)."""
    if modality not in _MOD_CODE:
        raise ContractError(f"unknown modality {modality!r}")
    tmpl = template_a(spec, cls) if modality == "a" else template_v(spec, cls)
    return _draw(spec, sample_id, modality, tmpl)


def generate_synthetic(spec: SyntheticSpec) -> Splits:
    """Class-balanced train/val/test splits with globally unique, stable ids.

    Ids are assigned split by split (train, val, test), class-major within a
    split, so sample ``i`` of a split always receives the same id for a given
    ``samples_per_class``.
    """
    templates = {m: _templates(spec, m) for m in MODALITIES}
    out = []
    next_id = 0
    for split in SPLITS:
        per = spec.samples_per_class[split]
        n = per * spec.n_classes
        ids = np.arange(next_id, next_id + n, dtype=np.int64)
        labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), per)
        x_a = np.empty((n,) + spec.shape_a)
        x_v = np.empty((n,) + spec.shape_v)
        for i, (sid, cls) in enumerate(zip(ids, labels)):
            x_a[i] = _draw(spec, sid, "a", templates["a"][cls])
            x_v[i] = _draw(spec, sid, "v", templates["v"][cls])
        out.append(MultiModalDataset(ids, x_a, x_v, labels))
        next_id += n
    return Splits(*out)


def split_dataset(dataset: MultiModalDataset, fractions, seed: int = 0) -> Splits:
    """Stratified train/val/test partition of ``dataset``.

    Per class, counts are ``floor(fraction * n_c)`` with the remainder handed
    to the splits with the largest fractional parts (ties: train, val, test).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n_nonzero = sum(f > 0 for f in fractions)
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < n_nonzero:
            raise ContractError(
                f"class {int(cls)} has {len(members)} samples, fewer than {n_nonzero} non-empty splits"
            )
        rng = np.random.default_rng([seed, int(cls), 9001])
        members = members[rng.permutation(len(members))]
        raw = [f * len(members) for f in fractions]
        counts = [int(np.floor(r + 1e-9)) for r in raw]
        remainder = len(members) - sum(counts)
        order = sorted(range(3), key=lambda j: (-(raw[j] - counts[j]), j))
        for j in order[:remainder]:
            counts[j] += 1
        start = 0
        for j, n in enumerate(counts):
            parts[j].extend(members[start:start + n].tolist())
            start += n
    return Splits(*(dataset.subset(sorted(p)) for p in parts))
