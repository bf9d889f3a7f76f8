"""Full-volume inference: patch placement, prediction, majority-vote fusion.

Patches come from a deterministic grid with 50% per-axis overlap (which
guarantees every voxel is covered) plus prior-guided centers sampled
inside each organ's prior region; all patch predictions are fused by
per-voxel plurality vote.
"""

from __future__ import annotations

import numpy as np

from . import net, rng
from .core import LabelMap, Volume
from .sampler import (
    OrganEmptyError,
    PatchGeometry,
    extract_box,
    extract_patch,
    fuse_majority_vote,
    grid_centers,
    sample_centers,
)


def _dominant_organ(prior: LabelMap, center, patch_dims) -> int:
    """Most frequent foreground prior class in the box; -1 if none."""
    box = extract_box(prior.labels, center, patch_dims)
    counts = np.bincount(box.ravel(), minlength=prior.num_classes)
    counts[0] = 0
    if counts.max() == 0:
        return -1
    return int(counts.argmax())


def infer_volume(
    params: dict[str, np.ndarray],
    net_cfg: net.NetConfig,
    image: Volume,
    prior: LabelMap,
    geometry: PatchGeometry,
    seed: int = 0,
    subject: int = 0,
) -> LabelMap:
    """Predicted label map for one (windowed, normalized) volume."""
    jobs: list[tuple[tuple[int, int, int], int]] = []
    for center in grid_centers(image.dims, geometry.patch_dims):
        jobs.append((center, _dominant_organ(prior, center, geometry.patch_dims)))
    gen = rng.stream(seed, "infer-centers", subject)
    organ_ids = geometry.organ_ids if geometry.organ_ids else tuple(range(1, prior.num_classes))
    for organ in organ_ids:
        try:
            centers = sample_centers(prior, organ, geometry.centers_per_organ, gen)
        except OrganEmptyError:
            continue
        jobs.extend((c, organ) for c in centers)

    predictions = []
    for center, organ in jobs:
        patch = extract_patch(image, prior, center, geometry, organ, "target", subject)
        probs = net.forward_padded(params, net_cfg, patch.channels())
        predictions.append((probs, center))
    fused = fuse_majority_vote(predictions, image.dims, net_cfg.num_classes)
    return LabelMap(fused, image.spacing, net_cfg.num_classes)
