"""Organ-aware patch sampling and majority-vote label fusion.

Training patches are centered on voxels sampled uniformly (with
replacement) inside an organ's coarse-prior region; each patch carries
the normalized image and a binary mask of that single organ as a second
channel.  At inference, per-voxel argmax votes from overlapping patch
predictions are fused by plurality, ties toward the lowest class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap, Volume


class OrganEmptyError(RuntimeError):
    def __init__(self, organ: int):
        super().__init__(f"organ class {organ} has no voxels in the prior")
        self.organ = organ


@dataclass(frozen=True)
class PatchGeometry:
    patch_dims: tuple[int, int, int]
    centers_per_organ: int = 8
    organ_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if any(p < 1 for p in self.patch_dims):
            raise ValueError("patch dims must be positive")
        if self.centers_per_organ < 1:
            raise ValueError("centers_per_organ must be >= 1")


@dataclass(frozen=True)
class Patch:
    image: np.ndarray  # (px, py, pz) float32
    prior: np.ndarray  # (px, py, pz) float32, values in {0, 1}
    center: tuple[int, int, int]
    organ: int
    domain: str  # "source" | "target"
    subject: int

    def channels(self) -> np.ndarray:
        """Stacked (2, px, py, pz) network input."""
        return np.stack([self.image, self.prior])


def sample_centers(prior: LabelMap, organ: int, n: int, gen: np.random.Generator) -> list[tuple[int, int, int]]:
    """n voxel coordinates with prior label == organ, uniform with replacement."""
    coords = np.argwhere(prior.labels == organ)
    if coords.shape[0] == 0:
        raise OrganEmptyError(organ)
    picks = gen.integers(0, coords.shape[0], size=n)
    return [tuple(int(c) for c in coords[i]) for i in picks]


def _box(center: tuple[int, int, int], patch_dims) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    # Even dims put the extra voxel on the positive side.
    lo = tuple(center[a] - (patch_dims[a] - 1) // 2 for a in range(3))
    hi = tuple(lo[a] + patch_dims[a] for a in range(3))
    return lo, hi


def extract_box(a: np.ndarray, center: tuple[int, int, int], patch_dims, fill=0) -> np.ndarray:
    """Copy of the patch box around center; overhang takes the fill value."""
    lo, hi = _box(center, patch_dims)
    out = np.full(tuple(patch_dims), fill, dtype=a.dtype)
    src = tuple(slice(max(lo[i], 0), min(hi[i], a.shape[i])) for i in range(3))
    dst = tuple(slice(src[i].start - lo[i], src[i].stop - lo[i]) for i in range(3))
    out[dst] = a[src]
    return out


def extract_patch(
    image: Volume,
    prior: LabelMap,
    center: tuple[int, int, int],
    geometry: PatchGeometry,
    organ: int,
    domain: str = "source",
    subject: int = 0,
) -> Patch:
    """Axis-aligned box around center; overhang is zero-padded."""
    dims = image.dims
    if any(not 0 <= center[a] < dims[a] for a in range(3)):
        raise ValueError(f"center {center} outside volume dims {dims}")
    img = extract_box(image.data, center, geometry.patch_dims)
    pri = extract_box((prior.labels == organ).astype(np.float32), center, geometry.patch_dims)
    return Patch(img, pri, tuple(center), organ, domain, subject)


def grid_centers(volume_dims, patch_dims) -> list[tuple[int, int, int]]:
    """Deterministic patch centers covering the volume with 50% overlap."""
    starts = []
    for a in range(3):
        p, n = patch_dims[a], volume_dims[a]
        stride = max(1, p // 2)
        last = max(n - p, 0)
        s = list(range(0, last + 1, stride))
        if s[-1] != last:
            s.append(last)
        starts.append(s)
    centers = []
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                centers.append(tuple(starts_a + (p - 1) // 2 for starts_a, p in zip((sx, sy, sz), patch_dims)))
    return centers


def fuse_majority_vote(
    predictions: list[tuple[np.ndarray, tuple[int, int, int]]],
    volume_dims: tuple[int, int, int],
    num_classes: int,
) -> np.ndarray:
    """Per-voxel plurality over patch argmax votes; uncovered voxels are background.

    predictions: (probs over patch (C, px, py, pz), center) pairs.
    Returns a (nx, ny, nz) uint8 label array.
    """
    if not predictions:
        raise ValueError("empty prediction list")
    votes = np.zeros((num_classes,) + tuple(volume_dims), dtype=np.int32)
    for probs, center in predictions:
        patch_dims = probs.shape[1:]
        hard = np.argmax(probs, axis=0)
        lo, hi = _box(center, patch_dims)
        src = tuple(slice(max(lo[a], 0), min(hi[a], volume_dims[a])) for a in range(3))
        local = tuple(slice(src[a].start - lo[a], src[a].stop - lo[a]) for a in range(3))
        region = hard[local]
        for c in range(num_classes):
            votes[(c,) + src] += region == c
    fused = np.argmax(votes, axis=0).astype(np.uint8)
    fused[votes.sum(axis=0) == 0] = 0
    return fused
