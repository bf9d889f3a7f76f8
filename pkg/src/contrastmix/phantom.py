"""Synthetic paired contrast / non-contrast phantom generation.

Each subject is a set of ellipsoidal "organs" over a uniform background,
rasterized once into a shared ground-truth label map and rendered twice
with per-organ intensities: a high-contrast source rendering and a
low-contrast target rendering.  A bounded sinusoidal warp can be applied
to the target to model residual cross-domain misalignment.  Everything
is deterministic given (seed, subject_index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng
from .core import LabelMap, Spacing, Volume
from .mvol import write_mvol

FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


class GenerationError(RuntimeError):
    """Phantom configuration cannot be rasterized."""


@dataclass(frozen=True)
class OrganSpec:
    """One ellipsoidal organ with per-domain mean intensity."""

    class_id: int
    center: tuple[float, float, float]  # voxel coords, fractional allowed
    semi_axes: tuple[float, float, float]  # voxels
    source_hu: float
    target_hu: float

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"organ class_id must be >= 1, got {self.class_id}")
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError(f"organ {self.class_id}: semi-axes must be positive")


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int]
    spacing: Spacing = Spacing(0.68, 0.68, 3.0)
    background_hu: float = 40.0
    organs: tuple[OrganSpec, ...] = ()
    noise_sigma: float = 0.0  # HU
    center_jitter: float = 0.0  # voxels, uniform per axis
    misalignment: float = 0.0  # voxels, max displacement per axis
    num_subjects: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_subjects < 1:
            raise ValueError("num_subjects must be >= 1")
        if self.noise_sigma < 0 or self.misalignment < 0 or self.center_jitter < 0:
            raise ValueError("noise_sigma, misalignment and center_jitter must be >= 0")

    @property
    def num_classes(self) -> int:
        return 1 + max((o.class_id for o in self.organs), default=1)


def _jittered_centers(cfg: PhantomConfig, subject_index: int) -> list[tuple[float, float, float]]:
    gen = rng.stream(cfg.seed, "phantom-jitter", subject_index)
    centers = []
    for organ in cfg.organs:
        offset = gen.uniform(-cfg.center_jitter, cfg.center_jitter, size=3)
        c = tuple(float(organ.center[a] + offset[a]) for a in range(3))
        for a in range(3):
            if c[a] - organ.semi_axes[a] < 0 or c[a] + organ.semi_axes[a] > cfg.dims[a] - 1:
                raise GenerationError(
                    f"organ class {organ.class_id} leaves the volume on axis {a} "
                    f"(center {c[a]:.2f}, semi-axis {organ.semi_axes[a]})"
                )
        centers.append(c)
    return centers


def _rasterize(cfg: PhantomConfig, centers) -> np.ndarray:
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    grid = np.indices(cfg.dims, dtype=np.float64)
    for organ, c in zip(cfg.organs, centers):
        q = sum(((grid[a] - c[a]) / organ.semi_axes[a]) ** 2 for a in range(3))
        labels[q <= 1.0] = organ.class_id  # later organs overwrite earlier ones
    return labels


def displacement_field(cfg: PhantomConfig, subject_index: int) -> np.ndarray:
    """Smooth per-axis displacement (3, nx, ny, nz), bounded by cfg.misalignment."""
    gen = rng.stream(cfg.seed, "phantom-warp", subject_index)
    phases = gen.random((3, 3))
    nx, ny, nz = cfg.dims
    x = np.arange(nx, dtype=np.float64)[:, None, None] / nx
    y = np.arange(ny, dtype=np.float64)[None, :, None] / ny
    z = np.arange(nz, dtype=np.float64)[None, None, :] / nz
    disp = np.empty((3,) + cfg.dims)
    for a in range(3):
        disp[a] = (
            cfg.misalignment
            * np.sin(2 * np.pi * (x + phases[a, 0]))
            * np.sin(2 * np.pi * (y + phases[a, 1]))
            * np.sin(2 * np.pi * (z + phases[a, 2]))
        )
    return disp


def _warp(field: np.ndarray, disp: np.ndarray, order: int) -> np.ndarray:
    coords = np.indices(field.shape, dtype=np.float64) + disp
    return ndimage.map_coordinates(field, coords, order=order, mode="nearest")


def generate_pair(cfg: PhantomConfig, subject_index: int) -> tuple[Volume, Volume, LabelMap]:
    """Deterministic (source, target, truth) triple for one subject."""
    if subject_index >= cfg.num_subjects:
        raise ValueError(f"subject_index {subject_index} >= num_subjects {cfg.num_subjects}")
    centers = _jittered_centers(cfg, subject_index)
    labels = _rasterize(cfg, centers)

    lut_src = np.full(cfg.num_classes, cfg.background_hu)
    lut_tgt = np.full(cfg.num_classes, cfg.background_hu)
    for organ in cfg.organs:
        lut_src[organ.class_id] = organ.source_hu
        lut_tgt[organ.class_id] = organ.target_hu

    src = lut_src[labels]
    tgt = lut_tgt[labels]
    if cfg.misalignment > 0:
        tgt = _warp(tgt, displacement_field(cfg, subject_index), order=1)
    if cfg.noise_sigma > 0:
        src = src + rng.normal(rng.stream(cfg.seed, "phantom-noise-src", subject_index), cfg.dims, cfg.noise_sigma)
        tgt = tgt + rng.normal(rng.stream(cfg.seed, "phantom-noise-tgt", subject_index), cfg.dims, cfg.noise_sigma)

    truth = LabelMap(labels, cfg.spacing, cfg.num_classes)
    return (
        Volume(src.astype(np.float32), cfg.spacing),
        Volume(tgt.astype(np.float32), cfg.spacing),
        truth,
    )


def degrade_prior(truth: LabelMap, dilation_radius: int, flip_fraction: float, seed: int) -> LabelMap:
    """Controllable-quality coarse prior from ground truth.

    Each organ region is dilated by a 6-connectivity ball; background
    voxels claimed by several dilated organs go to the lowest class id,
    original foreground is preserved.  Then flip_fraction of the
    foreground is dropped to background at random.
    """
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError("flip_fraction must be in [0, 1]")
    labels = truth.labels.copy()
    if dilation_radius > 0:
        out = labels.copy()
        claimed = labels > 0
        for cls in range(1, truth.num_classes):
            region = labels == cls
            if not region.any():
                continue
            grown = ndimage.binary_dilation(region, FACE_NEIGHBORS, iterations=dilation_radius)
            take = grown & ~claimed
            out[take] = cls
            claimed |= take
        labels = out
    if flip_fraction > 0:
        gen = rng.stream(seed, "prior-flip")
        fg = np.flatnonzero(labels.ravel() > 0)
        k = int(round(flip_fraction * fg.size))
        if k:
            drop = gen.choice(fg, size=k, replace=False)
            flat = labels.ravel()
            flat[drop] = 0
            labels = flat.reshape(truth.dims)
    return LabelMap(labels, truth.spacing, truth.num_classes)


def split_dataset(cfg: PhantomConfig, ratios: tuple[float, float, float]) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, covering train/val/test subject split, deterministic by seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = cfg.num_subjects
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    for name, ratio, size in (("train", ratios[0], n_train), ("val", ratios[1], n_val), ("test", ratios[2], n_test)):
        if ratio > 0 and size == 0:
            raise ValueError(f"split '{name}' with ratio {ratio} yields zero subjects out of {n}")
    perm = rng.stream(cfg.seed, "split").permutation(n)
    train = sorted(int(i) for i in perm[:n_train])
    val = sorted(int(i) for i in perm[n_train:n_train + n_val])
    test = sorted(int(i) for i in perm[n_train + n_val:])
    return train, val, test


@dataclass(frozen=True)
class Subject:
    index: int
    source: Path
    target: Path
    truth: Path


def subject_paths(dataset_dir, index: int) -> Subject:
    d = Path(dataset_dir)
    return Subject(index, d / f"s{index}_src.mvol", d / f"s{index}_tgt.mvol", d / f"s{index}_truth.mvol")


def write_dataset(cfg: PhantomConfig, out_dir, config_text: str = "") -> list[Subject]:
    """Write per-subject MVOL triples plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i in range(cfg.num_subjects):
        src, tgt, truth = generate_pair(cfg, i)
        s = subject_paths(out, i)
        write_mvol(s.source, src)
        write_mvol(s.target, tgt)
        write_mvol(s.truth, truth)
        subjects.append(s)
    lines = [f"subjects {cfg.num_subjects}", f"classes {cfg.num_classes}"]
    lines += [f"subject {s.index} {s.source.name} {s.target.name} {s.truth.name}" for s in subjects]
    if config_text:
        lines += ["", "# generating config", *config_text.splitlines()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return subjects
