"""Finite-difference verification of the analytic gradients.

Runs every differentiable training loss through a small network in
float64 and compares analytic parameter gradients against central
differences at randomly sampled coordinates of every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, net, rng

FD_STEP = 1e-5
FAIL_THRESHOLD = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    per_loss: dict[str, float]
    per_layer: dict[str, float]

    @property
    def failed_layers(self) -> list[str]:
        return sorted(k for k, v in self.per_layer.items() if v > FAIL_THRESHOLD)

    @property
    def ok(self) -> bool:
        return not self.failed_layers


def _random_simplex(gen, shape) -> np.ndarray:
    a = gen.random(shape) + 0.05
    return a / a.sum(axis=0, keepdims=True)


def _check_loss(loss_fn, params, coords, step=FD_STEP):
    """loss_fn(params) -> (value, grads dict); returns per-coordinate rel errors."""
    _, grads = loss_fn(params)
    errs = {}
    for name, idx in coords:
        p = {k: v.copy() for k, v in params.items()}
        p[name][idx] += step
        up, _ = loss_fn_value(loss_fn, p)
        p[name][idx] -= 2 * step
        down, _ = loss_fn_value(loss_fn, p)
        fd = (up - down) / (2 * step)
        an = grads[name][idx]
        # The floor keeps finite-difference roundoff (~1e-11 on an O(1)
        # loss) from dominating coordinates whose true gradient is ~0.
        rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-6)
        errs.setdefault(name, 0.0)
        errs[name] = max(errs[name], rel)
    return errs


def loss_fn_value(loss_fn, params):
    value, grads = loss_fn(params)
    return value, grads


def _sample_coords(params, gen, n):
    names = sorted(params)
    coords = []
    for _ in range(n):
        name = names[int(gen.integers(0, len(names)))]
        flat = int(gen.integers(0, params[name].size))
        coords.append((name, np.unravel_index(flat, params[name].shape)))
    return coords


def grad_check(cfg: net.NetConfig, seed: int, coords_per_loss: int = 120) -> GradCheckReport:
    """Max relative error of analytic vs finite-difference gradients."""
    gen = rng.stream(seed, "gradcheck")
    dims = (8, 8, 4) if cfg.levels <= 2 else (8, 8, 8)
    params = net.params_astype(net.init_params(cfg, seed), np.float64)
    # Perturb away from the symmetric init so norm statistics are generic.
    params = {k: v + 0.05 * gen.standard_normal(v.shape) for k, v in params.items()}

    x1 = gen.random((cfg.in_channels,) + dims)
    x2 = gen.random((cfg.in_channels,) + dims)
    y = np.zeros((cfg.num_classes,) + dims)
    hard = gen.integers(0, cfg.num_classes, size=dims)
    for c in range(cfg.num_classes):
        y[c][hard == c] = 1.0
    m_soft = _random_simplex(gen, (cfg.num_classes,) + dims)
    m_t = _random_simplex(gen, (cfg.num_classes,) + dims)
    lam, lam_t = 0.7, 0.9

    def volume_objective(p):
        probs, caches = net.forward(p, cfg, x1)
        value, dprobs = losses.coarse_loss(probs, y)
        return value, net.backward(p, cfg, caches, dprobs)

    def teacher_dice(p):
        probs, caches = net.forward(p, cfg, x1)
        value, dprobs = losses.teacher_dice_loss(probs, m_soft)
        return value, net.backward(p, cfg, caches, dprobs)

    def unsupervised(p):
        ps, caches_s = net.forward(p, cfg, x1)
        pt, caches_t = net.forward(p, cfg, x2)
        value, d_ps, d_pt = losses.unsup_loss(ps, m_soft, pt, m_t, lam_t)
        grads = net.backward(p, cfg, caches_s, d_ps)
        for k, v in net.backward(p, cfg, caches_t, d_pt).items():
            grads[k] = grads[k] + v
        return value, grads

    def composite(p):
        ps, caches_s = net.forward(p, cfg, x1)
        pt, caches_t = net.forward(p, cfg, x2)
        l_ts, d1 = losses.teacher_dice_loss(ps, m_soft)
        l_tt, d2 = losses.teacher_dice_loss(pt, m_soft)
        l_un, d_ps, d_pt = losses.unsup_loss(ps, m_soft, pt, m_t, lam_t)
        value = losses.total_loss(l_ts, l_tt, l_un, lam)
        grads = net.backward(p, cfg, caches_s, d1 + lam * d_ps)
        for k, v in net.backward(p, cfg, caches_t, d2 + lam * d_pt).items():
            grads[k] = grads[k] + v
        return value, grads

    per_loss = {}
    per_layer: dict[str, float] = {}
    for name, fn in (
        ("volume_objective", volume_objective),
        ("teacher_dice", teacher_dice),
        ("unsupervised", unsupervised),
        ("composite", composite),
    ):
        coords = _sample_coords(params, gen, coords_per_loss)
        errs = _check_loss(fn, params, coords)
        per_loss[name] = max(errs.values())
        for layer, e in errs.items():
            per_layer[layer] = max(per_layer.get(layer, 0.0), e)
    return GradCheckReport(max(per_loss.values()), per_loss, per_layer)
