"""Training losses with analytic gradients w.r.t. the predicted probabilities.

Every loss returns (scalar value, gradient array[s] matching the
probability inputs); the network's ``backward`` consumes the gradient
and chains it through the softmax.  Pseudo-label arguments are treated
as constants (no gradient flows into them).

Conventions: cross-entropy is averaged over voxels, the L2 penalty over
voxels and channels, so loss magnitudes do not scale with patch size;
soft Dice terms are per-class sums over the patch with an epsilon guard
for empty classes.
"""

from __future__ import annotations

import numpy as np

LOG_DELTA = 1e-12


def coarse_loss(h: np.ndarray, y: np.ndarray, eps_dice: float = 1e-5):
    """Soft Dice + mean cross-entropy of probabilities h against one-hot y.

    Dice part: 1 - (2/A) sum_a (sum yh + eps) / (sum y^2 + sum h^2 + eps).
    Both arrays are (C, nx, ny, nz).
    """
    if h.shape != y.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {y.shape}")
    a = h.shape[0]
    nvox = h[0].size
    axes = (1, 2, 3)
    inter = (y * h).sum(axis=axes) + eps_dice
    denom = (y * y).sum(axis=axes) + (h * h).sum(axis=axes) + eps_dice
    dice = 1.0 - (2.0 / a) * (inter / denom).sum()
    ce = -(y * np.log(h + LOG_DELTA)).sum() / nvox
    value = float(dice + ce)

    d_dice = -(2.0 / a) * (y * denom[:, None, None, None] - inter[:, None, None, None] * 2.0 * h) / (
        denom[:, None, None, None] ** 2
    )
    d_ce = -(y / (h + LOG_DELTA)) / nvox
    return value, d_dice + d_ce


def teacher_dice_loss(p: np.ndarray, m: np.ndarray, eps_dice: float = 1e-5):
    """Per-class soft Dice of prediction p against pseudo-label map m.

    sum_c [1 - (2 sum p*m + eps) / (sum p + sum m + eps)]; m is constant.
    """
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {m.shape}")
    axes = (1, 2, 3)
    num = 2.0 * (p * m).sum(axis=axes) + eps_dice
    den = p.sum(axis=axes) + m.sum(axis=axes) + eps_dice
    value = float((1.0 - num / den).sum())
    dp = -(2.0 * m * den[:, None, None, None] - num[:, None, None, None]) / (den[:, None, None, None] ** 2)
    return value, dp


def unsup_loss(p_s: np.ndarray, m_s: np.ndarray, p_t: np.ndarray, m_t: np.ndarray, lam_t: float):
    """Teacher cross-entropy on the source side plus weighted L2 self-consistency.

    -(1/I) sum m_s log(p_s) + lam_t * (1/(I*C)) ||p_t - m_t||^2.
    Returns (value, d/dp_s, d/dp_t); m_s and m_t are constants.
    """
    if p_s.shape != m_s.shape or p_t.shape != m_t.shape:
        raise ValueError("shape mismatch in unsup_loss")
    nvox = p_s[0].size
    ce = -(m_s * np.log(p_s + LOG_DELTA)).sum() / nvox
    resid = p_t - m_t
    l2 = (resid * resid).sum() / p_t.size
    value = float(ce + lam_t * l2)
    d_ps = -(m_s / (p_s + LOG_DELTA)) / nvox
    d_pt = lam_t * 2.0 * resid / p_t.size
    return value, d_ps, d_pt


def total_loss(l_ts: float, l_tt: float, l_unsup: float, lam: float) -> float:
    return l_ts + l_tt + lam * l_unsup
