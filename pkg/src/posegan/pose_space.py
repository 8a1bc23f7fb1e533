"""Discrete pose vocabulary, continuous yaw/pitch coordinates and pose masks.

Discrete labels are enumerated pitch-major: ``label = pitch * n_yaw + yaw``.
This order is part of the manifest format and must not change.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

MASK_MODES = ("replicate", "hat")


@dataclass(frozen=True)
class PoseVocabulary:
    yaw_anchors: tuple[float, ...]
    pitch_anchors: tuple[float, ...]
    label_coords: dict[int, tuple[int, int]] = field(compare=False, repr=False)

    @property
    def n_yaw(self) -> int:
        return len(self.yaw_anchors)

    @property
    def n_pitch(self) -> int:
        return len(self.pitch_anchors)

    @property
    def n_discrete(self) -> int:
        return self.n_yaw * self.n_pitch

    @property
    def yaw_range(self) -> tuple[float, float]:
        return self.yaw_anchors[0], self.yaw_anchors[-1]

    @property
    def pitch_range(self) -> tuple[float, float]:
        return self.pitch_anchors[0], self.pitch_anchors[-1]

    def label_of(self, yaw_idx: int, pitch_idx: int) -> int:
        if not (0 <= yaw_idx < self.n_yaw and 0 <= pitch_idx < self.n_pitch):
            raise InvalidArgument(f"grid index ({yaw_idx}, {pitch_idx}) outside {self.n_yaw}x{self.n_pitch}")
        return pitch_idx * self.n_yaw + yaw_idx

    def to_dict(self) -> dict:
        return {"n_yaw": self.n_yaw, "n_pitch": self.n_pitch}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseVocabulary":
        return make_vocabulary(int(d["n_yaw"]), int(d["n_pitch"]))


@dataclass(frozen=True)
class PoseTarget:
    yaw: float
    pitch: float

    def is_anchor(self) -> bool:
        return float(self.yaw).is_integer() and float(self.pitch).is_integer()


def make_vocabulary(n_yaw: int, n_pitch: int) -> PoseVocabulary:
    if n_yaw < 1 or n_pitch < 1:
        raise InvalidArgument(f"pose grid needs at least one anchor per axis, got {n_yaw}x{n_pitch}")
    coords = {p * n_yaw + y: (y, p) for p in range(n_pitch) for y in range(n_yaw)}
    return PoseVocabulary(
        yaw_anchors=tuple(float(i) for i in range(n_yaw)),
        pitch_anchors=tuple(float(j) for j in range(n_pitch)),
        label_coords=coords,
    )


def label_to_target(vocab: PoseVocabulary, label: int) -> PoseTarget:
    label = int(label)
    if not 0 <= label < vocab.n_discrete:
        raise InvalidArgument(f"pose label {label} outside [0, {vocab.n_discrete})")
    y, p = vocab.label_coords[label]
    return PoseTarget(vocab.yaw_anchors[y], vocab.pitch_anchors[p])


def check_target(vocab: PoseVocabulary, target: PoseTarget) -> None:
    lo, hi = vocab.yaw_range
    if not lo <= target.yaw <= hi:
        raise InvalidArgument(f"yaw {target.yaw} outside [{lo}, {hi}]")
    lo, hi = vocab.pitch_range
    if not lo <= target.pitch <= hi:
        raise InvalidArgument(f"pitch {target.pitch} outside [{lo}, {hi}]")


def _normalize(v: float, lo: float, hi: float) -> float:
    # single-anchor axis normalizes to 0
    if hi == lo:
        return 0.0
    return (v - lo) / (hi - lo)


def normalized_coords(vocab: PoseVocabulary, target: PoseTarget) -> tuple[float, float]:
    check_target(vocab, target)
    return (_normalize(target.yaw, *vocab.yaw_range), _normalize(target.pitch, *vocab.pitch_range))


def _hat(t: float, k: int) -> np.ndarray:
    if k == 1:
        return np.array([t])
    centers = np.linspace(0.0, 1.0, k)
    return np.clip(1.0 - np.abs(t - centers) * (k - 1), 0.0, 1.0)


def mask_values(vocab: PoseVocabulary, target: PoseTarget, k_yaw: int = 3, k_pitch: int = 3,
                mode: str = "replicate") -> np.ndarray:
    """Per-channel scalar values of the pose mask, length ``k_yaw + k_pitch``."""
    ny, np_ = normalized_coords(vocab, target)
    if mode == "replicate":
        return np.concatenate([np.full(k_yaw, ny), np.full(k_pitch, np_)])
    if mode == "hat":
        return np.concatenate([_hat(ny, k_yaw), _hat(np_, k_pitch)])
    raise InvalidArgument(f"unknown pose mask mode {mode!r}; expected one of {MASK_MODES}")


def encode_pose_mask(vocab: PoseVocabulary, target: PoseTarget, fh: int, fw: int, k_yaw: int = 3,
                     k_pitch: int = 3, mode: str = "replicate") -> np.ndarray:
    """Broadcast the normalized pose over an ``fh x fw`` grid -> ``(fh, fw, k_yaw + k_pitch)``."""
    if fh < 1 or fw < 1:
        raise InvalidArgument(f"mask size must be positive, got {fh}x{fw}")
    vals = mask_values(vocab, target, k_yaw, k_pitch, mode).astype(np.float32)
    return np.broadcast_to(vals, (fh, fw, vals.size)).copy()


def sample_decimal_pose(vocab: PoseVocabulary, rng: np.random.Generator) -> PoseTarget:
    """Uniform sample over the closed yaw x pitch anchor rectangle."""
    y = rng.uniform(*vocab.yaw_range) if vocab.n_yaw > 1 else vocab.yaw_anchors[0]
    p = rng.uniform(*vocab.pitch_range) if vocab.n_pitch > 1 else vocab.pitch_anchors[0]
    return PoseTarget(float(y), float(p))


def nearest_label(vocab: PoseVocabulary, target: PoseTarget) -> int:
    """Closest discrete anchor; ties resolve to the lower index."""
    check_target(vocab, target)
    y = int(np.argmin([abs(a - target.yaw) for a in vocab.yaw_anchors]))
    p = int(np.argmin([abs(a - target.pitch) for a in vocab.pitch_anchors]))
    return vocab.label_of(y, p)
