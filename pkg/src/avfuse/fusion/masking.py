"""Confidence-driven masking schedule and zero-fill mask geometry.

For a training sample with mean stage-1 confidences ``c_a`` and ``c_v``::

    m_a = rho_a * tanh(eta_a * (c_a - c_v))   if c_a > c_v and c_v > t, else 0
    m_v = rho_v * tanh(eta_v * (c_v - c_a))   if c_v > c_a and c_a > t, else 0

so only the modality that is already easier for this sample gets masked, and
only while the other modality has something to learn from (confidence > t).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avfuse.errors import ContractError

IMAGE, SPECTROGRAM = "image", "spectrogram"
_MASK_KEY = 5501
_MOD_CODE = {"a": 0, "v": 1}


@dataclass(frozen=True)
class MaskingPolicy:
    rho_a: float = 1.0
    rho_v: float = 0.4
    eta_a: float = 1.0
    eta_v: float = 1.0
    t: float = 0.2
    patch_size: int = 2      # image masks: p x p patches
    stripe_width: int = 1    # spectrogram masks: stripes of width w
    kind_a: str = SPECTROGRAM
    kind_v: str = IMAGE
    resample_per_epoch: bool = True

    def __post_init__(self):
        for name in ("rho_a", "rho_v", "t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        for name in ("eta_a", "eta_v"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.patch_size < 1 or self.stripe_width < 1:
            raise ContractError("patch_size and stripe_width must be >= 1")
        for name in ("kind_a", "kind_v"):
            if getattr(self, name) not in (IMAGE, SPECTROGRAM):
                raise ContractError(f"{name} must be {IMAGE!r} or {SPECTROGRAM!r}")

    def kind(self, modality: str) -> str:
        return self.kind_a if modality == "a" else self.kind_v


def masking_ratio(c_a: float, c_v: float, policy: MaskingPolicy) -> tuple[float, float]:
    """Scalar schedule; at most one of the two ratios is nonzero."""
    if c_a > c_v and c_v > policy.t:
        return policy.rho_a * float(np.tanh(policy.eta_a * (c_a - c_v))), 0.0
    if c_v > c_a and c_a > policy.t:
        return 0.0, policy.rho_v * float(np.tanh(policy.eta_v * (c_v - c_a)))
    return 0.0, 0.0


def masking_ratios(c_a, c_v, policy: MaskingPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`masking_ratio` over arrays of confidences."""
    c_a = np.asarray(c_a, dtype=np.float64)
    c_v = np.asarray(c_v, dtype=np.float64)
    act_a = (c_a > c_v) & (c_v > policy.t)
    act_v = (c_v > c_a) & (c_a > policy.t)
    m_a = np.where(act_a, policy.rho_a * np.tanh(policy.eta_a * (c_a - c_v)), 0.0)
    m_v = np.where(act_v, policy.rho_v * np.tanh(policy.eta_v * (c_v - c_a)), 0.0)
    return m_a, m_v


def mask_rng(seed: int, sample_id: int, epoch: int, modality: str) -> np.random.Generator:
    return np.random.default_rng([seed, int(sample_id), int(epoch), _MOD_CODE[modality], _MASK_KEY])


def mask_quantum(shape: tuple[int, ...], kind: str, patch_size: int = 2, stripe_width: int = 1) -> float:
    h, w = shape[-2:]
    if kind == IMAGE:
        return patch_size * patch_size / (h * w)
    return stripe_width / w


def _patch_mask(h: int, w: int, ratio: float, p: int, rng: np.random.Generator) -> np.ndarray:
    grid_h, grid_w = h // p, w // p
    n = min(int(np.floor(ratio * h * w / (p * p) + 1e-9)), grid_h * grid_w)
    zero = np.zeros((h, w), dtype=bool)
    for cell in rng.permutation(grid_h * grid_w)[:n]:
        r, c = divmod(int(cell), grid_w)
        zero[r * p:(r + 1) * p, c * p:(c + 1) * p] = True
    return zero


def _stripe_mask(f: int, t: int, ratio: float, width: int, rng: np.random.Generator) -> np.ndarray:
    """Alternate time-column and frequency-row stripes while the zero fraction stays <= ratio.

    Every unused stripe of one kind adds the same number of new zeros, so the
    loop stops less than one column (width/T) short of ``ratio``.
    """
    cols = [list(rng.permutation(t // width)), list(rng.permutation(f // width))]
    zero = np.zeros((f, t), dtype=bool)
    total = f * t
    kind = 0
    while True:
        placed = False
        for k in (kind, 1 - kind):
            if not cols[k]:
                continue
            i = int(cols[k][0]) * width
            trial = zero.copy()
            if k == 0:
                trial[:, i:i + width] = True
            else:
                trial[i:i + width, :] = True
            if trial.sum() <= ratio * total + 1e-9:
                zero = trial
                cols[k].pop(0)
                kind = 1 - k
                placed = True
                break
        if not placed:
            return zero


def apply_mask(x: np.ndarray, kind: str, ratio: float, rng: np.random.Generator,
               patch_size: int = 2, stripe_width: int = 1) -> np.ndarray:
    """Zero-filled copy of ``x`` (C x H x W); ``x`` itself is never modified."""
    if not ratio < 1.0:
        raise ContractError(f"mask ratio must be < 1, got {ratio}")
    if ratio < 0:
        raise ContractError(f"mask ratio must be >= 0, got {ratio}")
    x = np.asarray(x)
    if ratio == 0.0:
        return x.copy()
    h, w = x.shape[-2:]
    if kind == IMAGE:
        zero = _patch_mask(h, w, ratio, patch_size, rng)
    elif kind == SPECTROGRAM:
        zero = _stripe_mask(h, w, ratio, stripe_width, rng)
    else:
        raise ContractError(f"unknown mask kind {kind!r}")
    out = x.copy()
    out[..., zero] = 0.0
    return out
