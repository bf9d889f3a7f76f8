"""Cross-domain adaptation mechanisms.

Covers the four mechanisms applied per training step of the adapted
student: K-fold stochastic augmentation with recorded inverse spatial
transforms, averaging of back-mapped self-predictions, temperature
sharpening of the averaged map, and beta-weighted mixing of images and
pseudo-probability maps across the source/target minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sampler import Patch, PatchGeometry

STAGES = ("coarse", "teacher", "student_contrastmix", "student_supervised_baseline")


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    num_classes: int
    geometry: PatchGeometry
    epochs: int = 5
    steps_per_epoch: int = 50
    k_augment: int = 1
    temperature: float = 0.1
    beta_alpha: float = 0.5
    beta_beta: float = 0.5
    lam: float = 1.0  # unsupervised-loss weight
    lam_t: float = 1.0  # L2 pseudo-label weight inside the unsupervised loss
    eps_dice: float = 1e-5
    base_lr: float = 1e-4
    weight_decay: float = 0.0
    per_sample_h: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")
        if self.k_augment < 1:
            raise ValueError("k_augment must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.beta_alpha <= 0 or self.beta_beta <= 0:
            raise ValueError("beta parameters must be > 0")
        if self.lam < 0 or self.lam_t < 0:
            raise ValueError("loss weights must be >= 0")
        if self.eps_dice <= 0:
            raise ValueError("eps_dice must be > 0")


@dataclass(frozen=True)
class SpatialTransform:
    """Axis flips followed by an integer translation (zero padding)."""

    flips: tuple[bool, bool, bool] = (False, False, False)
    shifts: tuple[int, int, int] = (0, 0, 0)
    gain: float = 1.0  # image-channel intensity factor, spatial ops ignore it

    def apply(self, a: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = a
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, axis=ax)
        return _shift(out, self.shifts, fill)

    def invert(self, a: np.ndarray, fill: float = 0.0) -> np.ndarray:
        out = _shift(a, tuple(-s for s in self.shifts), fill)
        for ax, f in enumerate(self.flips):
            if f:
                out = np.flip(out, axis=ax)
        return np.ascontiguousarray(out)

    def apply_channels(self, a: np.ndarray, fill: float = 0.0) -> np.ndarray:
        return np.stack([self.apply(a[c], fill) for c in range(a.shape[0])])

    def invert_channels(self, a: np.ndarray, fill: float = 0.0) -> np.ndarray:
        return np.stack([self.invert(a[c], fill) for c in range(a.shape[0])])


def _shift(a: np.ndarray, shifts, fill: float) -> np.ndarray:
    out = np.full_like(a, fill)
    src = []
    dst = []
    for ax in range(3):
        s = shifts[ax]
        n = a.shape[ax]
        if abs(s) >= n:
            return out
        src.append(slice(max(-s, 0), n - max(s, 0)))
        dst.append(slice(max(s, 0), n - max(-s, 0)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def augment_k(patch: Patch, k: int, gen: np.random.Generator) -> list[tuple[Patch, SpatialTransform]]:
    """K independent augmented copies with their transforms recorded.

    Flips and +-2 voxel translations are applied identically to image
    and prior channels; the multiplicative intensity jitter in
    [0.9, 1.1] touches the image channel only.
    """
    out = []
    for _ in range(k):
        t = SpatialTransform(
            flips=tuple(bool(b) for b in gen.integers(0, 2, size=3)),
            shifts=tuple(int(s) for s in gen.integers(-2, 3, size=3)),
            gain=float(gen.uniform(0.9, 1.1)),
        )
        img = t.apply(patch.image) * np.float32(t.gain)
        pri = t.apply(patch.prior)
        out.append((Patch(img, pri, patch.center, patch.organ, patch.domain, patch.subject), t))
    return out


def average_prediction(predict_fn, augmented: list[tuple[Patch, SpatialTransform]], num_classes: int) -> np.ndarray:
    """Mean of per-augmentation predictions mapped back to patch space.

    Voxels an inverse transform cannot see are filled with the uniform
    distribution so the result stays a valid probability map.
    """
    acc = None
    uniform = 1.0 / num_classes
    for patch, t in augmented:
        pred = predict_fn(patch)
        back = t.invert_channels(pred, fill=uniform)
        acc = back if acc is None else acc + back
    return acc / len(augmented)


def sharpen(q: np.ndarray, temperature: float) -> np.ndarray:
    """Raise channel probabilities to 1/T and renormalize per voxel."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    powed = np.power(np.maximum(q, 0.0), 1.0 / temperature)
    total = powed.sum(axis=0, keepdims=True)
    if np.any(total <= 0):
        raise FloatingPointError("all-zero probability vector cannot be sharpened")
    return powed / total


def sample_beta_weight(alpha: float, beta: float, gen: np.random.Generator) -> float:
    """One Beta(alpha, beta) draw, shared across the step's minibatch."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("beta parameters must be > 0")
    return float(gen.beta(alpha, beta))


def mix_batch(
    batch: list[tuple[np.ndarray, np.ndarray]],
    h,
    gen: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Convex combination of each item with a shuffled partner.

    batch items are (multi-channel input m, pseudo-probability map p);
    both image and prior channels of m are mixed, p channelwise.  h is
    one scalar shared by the batch, or a per-item sequence.
    """
    hs = [float(h)] * len(batch) if np.isscalar(h) else [float(v) for v in h]
    if len(hs) != len(batch):
        raise ValueError("per-sample h length must match the batch")
    perm = gen.permutation(len(batch))
    out = []
    for i, (m, p) in enumerate(batch):
        m2, p2 = batch[perm[i]]
        out.append((hs[i] * m + (1.0 - hs[i]) * m2, hs[i] * p + (1.0 - hs[i]) * p2))
    return out
