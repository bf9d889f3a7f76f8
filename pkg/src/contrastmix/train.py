"""Staged training: coarse localizer, source teacher, adapted student.

Stages:
  coarse                       whole-volume localizer on 2x-downsampled
                               source volumes against source labels.
  teacher                      patch model on source patches against
                               source labels.
  student_supervised_baseline  identical to teacher; kept as the
                               source-only comparator applied to the
                               target domain at evaluation time.
  student_contrastmix          the adapted student: teacher pseudo-labels
                               on source patches, sharpened averaged
                               self-predictions on target patches,
                               beta-weighted cross-domain mixing, and the
                               composite loss.  Target ground truth is
                               never loaded in any stage.

The student stage consumes prior label maps materialized beforehand
(from a trained coarse model or from the degradation oracle), so its
only inputs are images, priors and the teacher checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapt, losses, net, optim, rng
from .adapt import TrainConfig
from .core import LabelMap, Volume, one_hot_encode, window_and_normalize
from .mvol import read_mvol
from .phantom import degrade_prior, subject_paths
from .sampler import extract_box, extract_patch, sample_centers


class TrainingAbortError(RuntimeError):
    """Non-finite loss; carries the step diagnostics."""


class MissingDependencyError(RuntimeError):
    pass


LOG_COLUMNS = ("epoch", "step", "stage", "L_Ts", "L_Tt", "L_unsup", "L_total", "lr", "h")


@dataclass(frozen=True)
class SubjectData:
    index: int
    source: Volume
    target: Volume
    prior: LabelMap
    truth: LabelMap | None  # None for stages that must not see labels


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[tuple]  # rows matching LOG_COLUMNS


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def log_to_csv(log) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for epoch, step, stage, lts, ltt, lun, ltot, lr, h in log:
        lines.append(
            f"{epoch},{step},{stage},{_fmt(lts)},{_fmt(ltt)},{_fmt(lun)},{_fmt(ltot)},{_fmt(lr)},{_fmt(h)}"
        )
    return "\n".join(lines) + "\n"


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x mean pooling; odd trailing voxels are edge-padded first."""
    pads = [(0, d % 2) for d in a.shape]
    if any(p[1] for p in pads):
        a = np.pad(a, pads, mode="edge")
    nx, ny, nz = a.shape
    return a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))


def downsample2_labels(a: np.ndarray) -> np.ndarray:
    return a[::2, ::2, ::2]


def upsample2_labels(a: np.ndarray, dims) -> np.ndarray:
    up = a.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)
    return up[: dims[0], : dims[1], : dims[2]]


def load_subject(
    dataset_dir,
    index: int,
    window: tuple[float, float],
    prior: LabelMap,
    with_truth: bool,
) -> SubjectData:
    paths = subject_paths(dataset_dir, index)
    source = window_and_normalize(read_mvol(paths.source), *window)
    target = window_and_normalize(read_mvol(paths.target), *window)
    truth = read_mvol(paths.truth) if with_truth else None
    return SubjectData(index, source, target, prior, truth)


def oracle_priors(dataset_dir, indices, dilation: int, flip: float, seed: int) -> dict[int, LabelMap]:
    """Degraded-truth priors, one per subject, deterministic by seed."""
    priors = {}
    for i in indices:
        truth = read_mvol(subject_paths(dataset_dir, i).truth)
        priors[i] = degrade_prior(truth, dilation, flip, seed + i)
    return priors


def coarse_priors(
    dataset_dir,
    indices,
    coarse_params: dict[str, np.ndarray],
    coarse_cfg: net.NetConfig,
    window: tuple[float, float],
) -> dict[int, LabelMap]:
    """Priors from a trained coarse model applied to the source volumes."""
    priors = {}
    for i in indices:
        vol = window_and_normalize(read_mvol(subject_paths(dataset_dir, i).source), *window)
        down = downsample2(vol.data).astype(np.float32)
        probs = net.forward_padded(coarse_params, coarse_cfg, down[None])
        labels = upsample2_labels(np.argmax(probs, axis=0).astype(np.uint8), vol.dims)
        priors[i] = LabelMap(labels, vol.spacing, coarse_cfg.num_classes)
    return priors


def _organs_present(prior: LabelMap, organ_ids) -> list[int]:
    present = np.unique(prior.labels)
    wanted = organ_ids if organ_ids else range(1, prior.num_classes)
    return [int(c) for c in wanted if c in present]


def _check_finite(value, stage, epoch, step):
    if not np.isfinite(value):
        raise TrainingAbortError(f"non-finite loss {value} at stage={stage} epoch={epoch} step={step}")


def train(
    cfg: TrainConfig,
    net_cfg: net.NetConfig,
    subjects: list[SubjectData],
    teacher: tuple[dict[str, np.ndarray], net.NetConfig] | None = None,
) -> TrainResult:
    """Run one training stage; deterministic given cfg.seed and inputs."""
    if cfg.stage == "student_contrastmix" and teacher is None:
        raise MissingDependencyError("student_contrastmix requires a teacher checkpoint")
    params = net.init_params(net_cfg, cfg.seed)
    state = optim.AdamState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    gen = rng.stream(cfg.seed, f"train-{cfg.stage}")
    log: list[tuple] = []
    organ_cache = {s.index: _organs_present(s.prior, cfg.geometry.organ_ids) for s in subjects}
    if cfg.stage != "coarse":
        subjects = [s for s in subjects if organ_cache[s.index]]
        if not subjects:
            raise MissingDependencyError("no training subject has any organ in its prior")

    for epoch in range(cfg.epochs):
        lr = optim.lr_at_epoch(state, epoch)
        for step in range(cfg.steps_per_epoch):
            s = subjects[int(gen.integers(len(subjects)))]
            if cfg.stage == "coarse":
                row = _step_coarse(cfg, net_cfg, s, params, state, lr, gen)
            elif cfg.stage in ("teacher", "student_supervised_baseline"):
                row = _step_supervised(cfg, net_cfg, s, organ_cache[s.index], params, state, lr, gen)
            else:
                row = _step_contrastmix(cfg, net_cfg, s, organ_cache[s.index], params, state, lr, gen, teacher)
            params, row = row
            _check_finite(row[3], cfg.stage, epoch, step)
            log.append((epoch, step, cfg.stage) + row)
    return TrainResult(params, log)


def _step_coarse(cfg, net_cfg, s, params, state, lr, gen):
    if s.truth is None:
        raise MissingDependencyError("coarse stage needs source ground truth")
    x = downsample2(s.source.data).astype(np.float32)[None]
    labels = downsample2_labels(s.truth.labels)
    y = one_hot_encode(LabelMap(labels, s.truth.spacing, s.truth.num_classes)).probs
    probs, caches = net.forward(params, net_cfg, x)
    value, dprobs = losses.coarse_loss(probs, y, cfg.eps_dice)
    grads = net.backward(params, net_cfg, caches, dprobs)
    return optim.adam_step(params, grads, state, lr), (0.0, 0.0, 0.0, value, lr, 0.0)


def _step_supervised(cfg, net_cfg, s, organs, params, state, lr, gen):
    if s.truth is None:
        raise MissingDependencyError("supervised stages need source ground truth")
    organ = organs[int(gen.integers(len(organs)))]
    center = sample_centers(s.prior, organ, 1, gen)[0]
    patch = extract_patch(s.source, s.prior, center, cfg.geometry, organ, "source", s.index)
    y_labels = extract_box(s.truth.labels, center, cfg.geometry.patch_dims)
    y = one_hot_encode(LabelMap(y_labels, s.truth.spacing, s.truth.num_classes)).probs
    probs, caches = net.forward(params, net_cfg, patch.channels())
    value, dprobs = losses.coarse_loss(probs, y, cfg.eps_dice)
    grads = net.backward(params, net_cfg, caches, dprobs)
    return optim.adam_step(params, grads, state, lr), (0.0, 0.0, 0.0, value, lr, 0.0)


def _step_contrastmix(cfg, net_cfg, s, organs, params, state, lr, gen, teacher):
    teacher_params, teacher_cfg = teacher
    c = net_cfg.num_classes
    organ = organs[int(gen.integers(len(organs)))]
    center = sample_centers(s.prior, organ, 1, gen)[0]
    m_s = extract_patch(s.source, s.prior, center, cfg.geometry, organ, "source", s.index)
    m_t = extract_patch(s.target, s.prior, center, cfg.geometry, organ, "target", s.index)

    # Teacher pseudo-label on the source patch; constant.
    pl_s, _ = net.forward(teacher_params, teacher_cfg, m_s.channels())

    # Averaged, back-mapped self-prediction on the target patch.  These
    # passes keep their caches: the L2 term differentiates through them.
    augmented = adapt.augment_k(m_t, cfg.k_augment, gen)
    aug_caches = []
    acc = None
    for patch_k, t_k in augmented:
        probs_k, caches_k = net.forward(params, net_cfg, patch_k.channels())
        aug_caches.append((t_k, caches_k))
        back = t_k.invert_channels(probs_k, fill=1.0 / c)
        acc = back if acc is None else acc + back
    q_t = acc / cfg.k_augment
    pl_t = adapt.sharpen(q_t, cfg.temperature)

    if cfg.per_sample_h:
        h = [adapt.sample_beta_weight(cfg.beta_alpha, cfg.beta_beta, gen) for _ in range(2)]
    else:
        h = adapt.sample_beta_weight(cfg.beta_alpha, cfg.beta_beta, gen)
    mixed = adapt.mix_batch([(m_s.channels(), pl_s), (m_t.channels(), pl_t)], h, gen)
    (x_s, p_s_target), (x_t, p_t_target) = mixed

    probs_mix_s, caches_mix_s = net.forward(params, net_cfg, x_s)
    probs_mix_t, caches_mix_t = net.forward(params, net_cfg, x_t)
    probs_src, caches_src = net.forward(params, net_cfg, m_s.channels())

    l_ts, d_mix_s = losses.teacher_dice_loss(probs_mix_s, p_s_target, cfg.eps_dice)
    l_tt, d_mix_t = losses.teacher_dice_loss(probs_mix_t, p_t_target, cfg.eps_dice)
    l_un, d_src, d_qt = losses.unsup_loss(probs_src, pl_s, q_t, pl_t, cfg.lam_t)
    value = losses.total_loss(l_ts, l_tt, l_un, cfg.lam)

    grads = net.backward(params, net_cfg, caches_mix_s, d_mix_s)
    for k, v in net.backward(params, net_cfg, caches_mix_t, d_mix_t).items():
        grads[k] = grads[k] + v
    for k, v in net.backward(params, net_cfg, caches_src, cfg.lam * d_src).items():
        grads[k] = grads[k] + v
    d_share = cfg.lam * d_qt / cfg.k_augment
    for t_k, caches_k in aug_caches:
        d_k = t_k.apply_channels(d_share, fill=0.0)
        for k, v in net.backward(params, net_cfg, caches_k, d_k).items():
            grads[k] = grads[k] + v

    h_logged = h if np.isscalar(h) else float(np.mean(h))
    return optim.adam_step(params, grads, state, lr), (l_ts, l_tt, l_un, value, lr, h_logged)
