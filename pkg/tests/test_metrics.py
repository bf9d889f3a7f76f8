from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy import stats

from contrastmix.metrics import (
    EmptyMaskError,
    dice_score,
    evaluate_pair,
    mean_surface_distance,
    surface_voxels,
    wilcoxon_signed_rank,
)


def brute_surface(mask):
    mask = mask.astype(bool)
    out = np.zeros_like(mask)
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    u, v, w = x + dx, y + dy, z + dz
                    if not (0 <= u < nx and 0 <= v < ny and 0 <= w < nz) or not mask[u, v, w]:
                        out[x, y, z] = True
                        break
    return out


def brute_msd(p, g, spacing):
    sp = np.asarray(spacing)
    pa = np.argwhere(brute_surface(p)) * sp
    ga = np.argwhere(brute_surface(g)) * sp

    def directed(a, b):
        return np.mean([np.sqrt(((pt - b) ** 2).sum(axis=1)).min() for pt in a])

    return 0.5 * (directed(pa, ga) + directed(ga, pa))


def brute_wilcoxon(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    w = ranks[d > 0].sum()
    n = d.size
    ws = []
    for signs in itertools.product([0, 1], repeat=n):
        ws.append(sum(r for r, s in zip(ranks, signs) if s))
    ws = np.array(ws)
    p_le = np.mean(ws <= w + 1e-12)
    p_ge = np.mean(ws >= w - 1e-12)
    return w, min(1.0, 2.0 * min(p_le, p_ge))


class TestDice:
    def test_identical(self):
        m = np.random.default_rng(0).random((4, 4, 4)) > 0.5
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        p = np.zeros((3, 3, 3), dtype=bool)
        g = np.zeros((3, 3, 3), dtype=bool)
        p[0, 0, 0] = True
        g[2, 2, 2] = True
        assert dice_score(p, g) == 0.0

    def test_half_overlap(self):
        p = np.zeros((8, 1, 1), dtype=bool)
        g = np.zeros((8, 1, 1), dtype=bool)
        p[0:4] = True
        g[2:6] = True
        assert dice_score(p, g) == pytest.approx(0.5)

    def test_both_empty(self):
        z = np.zeros((2, 2, 2), dtype=bool)
        assert dice_score(z, z) == 1.0

    def test_one_empty(self):
        p = np.zeros((2, 2, 2), dtype=bool)
        g = np.ones((2, 2, 2), dtype=bool)
        assert dice_score(p, g) == 0.0

    def test_symmetry_fuzz(self):
        gen = np.random.default_rng(1)
        for _ in range(100):
            p = gen.random((5, 5, 5)) > 0.6
            g = gen.random((5, 5, 5)) > 0.6
            assert dice_score(p, g) == dice_score(g, p)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


class TestSurface:
    def test_single_voxel(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        s = surface_voxels(m)
        assert s.sum() == 1 and s[1, 1, 1]

    def test_3x3x3_cube(self):
        m = np.zeros((5, 5, 5), dtype=bool)
        m[1:4, 1:4, 1:4] = True
        s = surface_voxels(m)
        assert int(s.sum()) == 26
        assert not s[2, 2, 2]

    def test_2x2x2_cube_all_surface(self):
        m = np.zeros((4, 4, 4), dtype=bool)
        m[1:3, 1:3, 1:3] = True
        assert int(surface_voxels(m).sum()) == 8

    def test_volume_border_is_surface(self):
        m = np.ones((3, 3, 3), dtype=bool)
        s = surface_voxels(m)
        assert not s[1, 1, 1]
        assert int(s.sum()) == 26

    def test_empty(self):
        assert surface_voxels(np.zeros((3, 3, 3), dtype=bool)).sum() == 0

    def test_matches_brute_force_fuzz(self):
        gen = np.random.default_rng(2)
        for _ in range(200):
            dims = tuple(int(d) for d in gen.integers(1, 9, size=3))
            m = gen.random(dims) > 0.5
            np.testing.assert_array_equal(surface_voxels(m), brute_surface(m))


class TestMSD:
    def test_identical_zero(self):
        m = np.zeros((5, 5, 5), dtype=bool)
        m[1:4, 1:4, 1:4] = True
        assert mean_surface_distance(m, m, (1, 1, 1)) == 0.0

    def test_two_points(self):
        p = np.zeros((5, 2, 2), dtype=bool)
        g = np.zeros((5, 2, 2), dtype=bool)
        p[0, 0, 0] = True
        g[3, 0, 0] = True
        assert mean_surface_distance(p, g, (1, 1, 1)) == pytest.approx(3.0)

    def test_anisotropic_slice_offset(self):
        p = np.zeros((2, 2, 3), dtype=bool)
        g = np.zeros((2, 2, 3), dtype=bool)
        p[0, 0, 0] = True
        g[0, 0, 1] = True
        assert mean_surface_distance(p, g, (0.68, 0.68, 3.0)) == pytest.approx(3.0)

    def test_empty_mask_error(self):
        m = np.ones((2, 2, 2), dtype=bool)
        with pytest.raises(EmptyMaskError):
            mean_surface_distance(m, np.zeros((2, 2, 2), dtype=bool), (1, 1, 1))

    def test_spacing_scaling(self):
        gen = np.random.default_rng(3)
        p = gen.random((6, 6, 6)) > 0.7
        g = gen.random((6, 6, 6)) > 0.7
        base = mean_surface_distance(p, g, (1, 1, 1))
        scaled = mean_surface_distance(p, g, (2, 2, 2))
        assert scaled == pytest.approx(2 * base)

    def test_symmetry(self):
        gen = np.random.default_rng(4)
        p = gen.random((6, 6, 6)) > 0.7
        g = gen.random((6, 6, 6)) > 0.7
        a = mean_surface_distance(p, g, (0.68, 0.68, 3.0))
        b = mean_surface_distance(g, p, (0.68, 0.68, 3.0))
        assert a == pytest.approx(b, abs=1e-12)

    def test_matches_brute_force_fuzz(self):
        gen = np.random.default_rng(5)
        for _ in range(50):
            dims = tuple(int(d) for d in gen.integers(2, 8, size=3))
            p = gen.random(dims) > 0.5
            g = gen.random(dims) > 0.5
            if not p.any() or not g.any():
                continue
            spacing = tuple(np.exp(gen.uniform(-0.5, 1.0, size=3)))
            got = mean_surface_distance(p, g, spacing)
            assert got == pytest.approx(brute_msd(p, g, spacing), abs=1e-9)

    def test_distance_transform_path_matches_brute_force(self):
        # big masks force the EDT branch; compare against the direct path
        gen = np.random.default_rng(6)
        p = np.zeros((24, 24, 24), dtype=bool)
        g = np.zeros((24, 24, 24), dtype=bool)
        p[2:20, 2:20, 2:20] = True
        g[4:22, 3:21, 2:20] = True
        got = mean_surface_distance(p, g, (1.0, 1.0, 1.0))
        assert got == pytest.approx(brute_msd(p, g, (1.0, 1.0, 1.0)), abs=1e-9)


class TestWilcoxon:
    def test_identical_samples(self):
        w, p = wilcoxon_signed_rank([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p == 1.0

    def test_n6_all_positive(self):
        a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        b = [0.9, 1.7, 2.6, 3.5, 4.4, 5.3]
        w, p = wilcoxon_signed_rank(a, b)
        assert w == 21.0
        assert p == pytest.approx(0.03125, abs=1e-12)

    def test_matches_enumeration_oracle_fuzz(self):
        gen = np.random.default_rng(7)
        checked = 0
        while checked < 100:
            n = int(gen.integers(2, 11))
            a = gen.integers(0, 6, size=n).astype(float) / 2.0
            b = gen.integers(0, 6, size=n).astype(float) / 2.0
            if np.all(a == b):
                continue
            w, p = wilcoxon_signed_rank(a, b)
            bw, bp = brute_wilcoxon(a, b)
            assert w == pytest.approx(bw)
            assert p == pytest.approx(bp, abs=1e-12)
            checked += 1

    def test_matches_scipy_no_ties(self):
        gen = np.random.default_rng(8)
        for _ in range(20):
            a = gen.standard_normal(12)
            b = gen.standard_normal(12)
            w, p = wilcoxon_signed_rank(a, b)
            ref = stats.wilcoxon(a, b, alternative="two-sided", mode="exact")
            assert p == pytest.approx(ref.pvalue, abs=1e-12)

    def test_normal_approximation_branch(self):
        gen = np.random.default_rng(9)
        a = gen.standard_normal(40) + 0.8
        b = gen.standard_normal(40)
        _, p = wilcoxon_signed_rank(a, b)
        ref = stats.wilcoxon(a, b, alternative="two-sided", mode="approx", correction=False)
        assert p == pytest.approx(ref.pvalue, rel=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0], [1.0, 2.0])


class TestEvaluatePair:
    def test_perfect_prediction(self):
        gen = np.random.default_rng(10)
        labels = gen.integers(0, 3, size=(6, 6, 6)).astype(np.uint8)
        results = evaluate_pair(labels, labels, (1, 1, 1), 3, subject=5)
        assert [r.organ for r in results] == [1, 2]
        for r in results:
            assert r.subject == 5
            assert r.dice == 1.0
            assert r.msd == 0.0

    def test_all_background_prediction(self):
        truth = np.zeros((5, 5, 5), dtype=np.uint8)
        truth[1:4, 1:4, 1:4] = 1
        pred = np.zeros((5, 5, 5), dtype=np.uint8)
        results = evaluate_pair(pred, truth, (1, 1, 1), 2, subject=0)
        assert results[0].dice == 0.0
        assert results[0].msd is None
