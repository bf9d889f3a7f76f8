"""Segmentation evaluation: Dice, mean surface distance, Wilcoxon test.

Surface distances are physical (millimeters, via voxel spacing) and use
the 6-neighborhood voxel surface.  The signed-rank test enumerates the
exact null distribution for n <= 20 and falls back to the tie-corrected
normal approximation above that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

BRUTE_FORCE_LIMIT = 512  # surface voxels; above this use the distance transform

FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


class EmptyMaskError(ValueError):
    """Surface distance is undefined for an empty mask."""


@dataclass(frozen=True)
class OrganResult:
    subject: int
    organ: int
    dice: float
    msd: float | None  # None when undefined (recorded as NA downstream)


def dice_score(p: np.ndarray, g: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); both-empty counts as perfect agreement."""
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with a background 6-neighbor.

    Out-of-bounds counts as background, so hull voxels are surface.
    """
    mask = mask.astype(bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, FACE_NEIGHBORS, border_value=0)
    return mask & ~interior


def _directed_mean(surf_a: np.ndarray, surf_b: np.ndarray, spacing) -> float:
    pts_a = np.argwhere(surf_a).astype(np.float64) * spacing
    n_a = pts_a.shape[0]
    n_b = int(surf_b.sum())
    if n_a * n_b <= BRUTE_FORCE_LIMIT ** 2:
        pts_b = np.argwhere(surf_b).astype(np.float64) * spacing
        d = np.sqrt(((pts_a[:, None, :] - pts_b[None, :, :]) ** 2).sum(axis=2))
        return float(d.min(axis=1).mean())
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    return float(dist_to_b[surf_a].mean())


def mean_surface_distance(p: np.ndarray, g: np.ndarray, spacing) -> float:
    """Symmetric mean nearest-surface distance in millimeters."""
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    surf_p = surface_voxels(p)
    surf_g = surface_voxels(g)
    if not surf_p.any() or not surf_g.any():
        raise EmptyMaskError("mean surface distance undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    return 0.5 * (_directed_mean(surf_p, surf_g, sp) + _directed_mean(surf_g, surf_p, sp))


def _signed_rank_setup(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("samples must be equal-length 1D arrays")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        return None
    ranks = stats.rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    return d, ranks, w_pos


def _exact_p(ranks: np.ndarray, w_pos: float) -> float:
    # Distribution of W+ over all sign assignments, via DP on doubled
    # ranks (ties give half-integer average ranks).
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    n_assign = counts.sum()
    w2 = int(np.rint(2.0 * w_pos))
    p_le = counts[: w2 + 1].sum() / n_assign
    p_ge = counts[w2:].sum() / n_assign
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


def _approx_p(ranks: np.ndarray, w_pos: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_corr = ((tie_counts ** 3 - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_corr
    z = (w_pos - mean) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """(W = sum of positive-difference ranks, two-sided p).

    Zero differences are dropped; all-zero differences give p = 1.
    """
    setup = _signed_rank_setup(a, b)
    if setup is None:
        return 0.0, 1.0
    d, ranks, w_pos = setup
    if d.size <= 20:
        return w_pos, _exact_p(ranks, w_pos)
    return w_pos, _approx_p(ranks, w_pos)


def evaluate_pair(pred_labels: np.ndarray, truth_labels: np.ndarray, spacing, num_classes: int, subject: int):
    """Per-organ Dice and MSD for one subject (foreground classes only)."""
    results = []
    for organ in range(1, num_classes):
        p = pred_labels == organ
        g = truth_labels == organ
        dice = dice_score(p, g)
        try:
            msd = mean_surface_distance(p, g, spacing)
        except EmptyMaskError:
            msd = None
        results.append(OrganResult(subject, organ, dice, msd))
    return results
