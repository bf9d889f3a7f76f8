"""Core volumetric types: intensity volumes, label maps, probability maps.

All arrays are indexed ``[x, y, z]`` (channel first for probability
maps) and flattened x-fastest when serialized.  Instances are immutable
after construction; the backing numpy arrays are marked read-only so
they can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-5


class InvalidWindowError(ValueError):
    """Intensity window with lo >= hi."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Spacing:
    """Physical voxel edge lengths in millimeters."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for v in (self.dx, self.dy, self.dz):
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"spacing must be positive and finite, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)


@dataclass(frozen=True)
class Volume:
    """3D scalar intensity grid with physical spacing."""

    data: np.ndarray  # (nx, ny, nz) float32
    spacing: Spacing

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """3D integer class grid; class 0 is background."""

    labels: np.ndarray  # (nx, ny, nz) uint8
    spacing: Spacing
    num_classes: int

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {a.shape}")
        if not (2 <= self.num_classes <= 255):
            raise ValueError(f"num_classes must be in [2, 255], got {self.num_classes}")
        if a.size and int(a.max()) >= self.num_classes:
            raise ValueError(f"label {int(a.max())} out of range for {self.num_classes} classes")
        object.__setattr__(self, "labels", _freeze(a.astype(np.uint8)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel class probabilities, channel first, channels sum to 1."""

    probs: np.ndarray  # (C, nx, ny, nz)
    spacing: Spacing
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        a = np.asarray(self.probs)
        if a.ndim != 4:
            raise ValueError(f"prob data must be (C, nx, ny, nz), got shape {a.shape}")
        if self.validate:
            if a.min() < -PROB_SUM_TOL or a.max() > 1.0 + PROB_SUM_TOL:
                raise ValueError("probabilities outside [0, 1]")
            sums = a.sum(axis=0)
            if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
                raise ValueError(f"channel sums deviate from 1 by {np.abs(sums - 1.0).max():.3g}")
        object.__setattr__(self, "probs", _freeze(a))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]


def window_and_normalize(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp intensities to [lo, hi] and map affinely to [0, 1]."""
    if not lo < hi:
        raise InvalidWindowError(f"window requires lo < hi, got [{lo}, {hi}]")
    out = (np.clip(v.data, lo, hi) - np.float32(lo)) / np.float32(hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def one_hot_encode(l: LabelMap) -> ProbMap:
    """One channel per class, 1 at the voxel's label, 0 elsewhere."""
    c = l.num_classes
    probs = np.zeros((c,) + l.dims, dtype=np.float32)
    idx = np.indices(l.dims)
    probs[l.labels, idx[0], idx[1], idx[2]] = 1.0
    return ProbMap(probs, l.spacing)


def argmax_labels(p: ProbMap) -> LabelMap:
    """Hard per-voxel decision; ties go to the lowest class index."""
    return LabelMap(np.argmax(p.probs, axis=0).astype(np.uint8), p.spacing, p.num_classes)
