from __future__ import annotations

import numpy as np
import pytest

from contrastmix import rng
from contrastmix.core import LabelMap, Spacing, Volume, one_hot_encode
from contrastmix.sampler import (
    OrganEmptyError,
    Patch,
    PatchGeometry,
    extract_box,
    extract_patch,
    fuse_majority_vote,
    grid_centers,
    sample_centers,
)

from conftest import random_labelmap, random_volume


class TestSampleCenters:
    def test_single_voxel_region(self, unit_spacing):
        labels = np.zeros((5, 5, 5), dtype=np.uint8)
        labels[2, 3, 1] = 1
        prior = LabelMap(labels, unit_spacing, 2)
        centers = sample_centers(prior, 1, 3, rng.stream(0, "t"))
        assert centers == [(2, 3, 1)] * 3

    def test_centers_inside_organ_fuzz(self, unit_spacing):
        gen = np.random.default_rng(4)
        for _ in range(50):
            prior = random_labelmap(gen, (6, 6, 6), 4)
            organ = int(gen.integers(1, 4))
            if not (prior.labels == organ).any():
                continue
            for c in sample_centers(prior, organ, 20, rng.stream(int(gen.integers(1 << 30)), "t")):
                assert prior.labels[c] == organ

    def test_empty_organ_raises(self, unit_spacing):
        prior = LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), unit_spacing, 3)
        with pytest.raises(OrganEmptyError, match="class 2"):
            sample_centers(prior, 2, 1, rng.stream(0, "t"))

    def test_two_voxel_region_balance(self, unit_spacing):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        labels[0, 0, 0] = 1
        labels[3, 3, 3] = 1
        prior = LabelMap(labels, unit_spacing, 2)
        centers = sample_centers(prior, 1, 10000, rng.stream(12, "balance"))
        n_first = sum(c == (0, 0, 0) for c in centers)
        # binomial(10000, 0.5): 3 sigma = 150
        assert abs(n_first - 5000) <= 150


class TestExtractPatch:
    def test_corner_padding(self, unit_spacing):
        gen = np.random.default_rng(1)
        image = random_volume(gen, (8, 8, 8))
        prior = LabelMap(np.ones((8, 8, 8), dtype=np.uint8), unit_spacing, 2)
        geo = PatchGeometry((6, 6, 6), 1)
        p = extract_patch(image, prior, (0, 0, 0), geo, 1)
        # lo = -2 on each axis: the first two planes are out of bounds
        assert np.all(p.image[:2, :, :] == 0.0)
        assert np.all(p.prior[:2, :, :] == 0.0)
        np.testing.assert_array_equal(p.image[2:, 2:, 2:], image.data[:4, :4, :4])

    def test_full_volume_patch(self, unit_spacing):
        gen = np.random.default_rng(2)
        image = random_volume(gen, (7, 7, 7))
        prior = LabelMap(np.ones((7, 7, 7), dtype=np.uint8), unit_spacing, 2)
        geo = PatchGeometry((7, 7, 7), 1)
        p = extract_patch(image, prior, (3, 3, 3), geo, 1)
        np.testing.assert_array_equal(p.image, image.data)
        assert np.all(p.prior == 1.0)

    def test_prior_channel_count_brute_force(self, unit_spacing):
        gen = np.random.default_rng(3)
        for _ in range(30):
            prior = random_labelmap(gen, (9, 9, 9), 3)
            image = random_volume(gen, (9, 9, 9))
            geo = PatchGeometry((4, 5, 6), 1)
            center = tuple(int(c) for c in gen.integers(0, 9, size=3))
            p = extract_patch(image, prior, center, geo, 1)
            lo = tuple(center[a] - (geo.patch_dims[a] - 1) // 2 for a in range(3))
            expected = 0
            for x in range(lo[0], lo[0] + 4):
                for y in range(lo[1], lo[1] + 5):
                    for z in range(lo[2], lo[2] + 6):
                        if 0 <= x < 9 and 0 <= y < 9 and 0 <= z < 9:
                            expected += prior.labels[x, y, z] == 1
            assert int(p.prior.sum()) == expected

    def test_even_dims_positive_bias(self, unit_spacing):
        image = Volume(np.arange(8, dtype=np.float32).reshape(8, 1, 1), unit_spacing)
        prior = LabelMap(np.ones((8, 1, 1), dtype=np.uint8), unit_spacing, 2)
        p = extract_patch(image, prior, (3, 0, 0), PatchGeometry((4, 1, 1), 1), 1)
        # box is [2, 6): one voxel before the center, two after
        np.testing.assert_array_equal(p.image[:, 0, 0], [2, 3, 4, 5])

    def test_center_outside_raises(self, unit_spacing):
        image = random_volume(np.random.default_rng(0), (4, 4, 4))
        prior = LabelMap(np.ones((4, 4, 4), dtype=np.uint8), unit_spacing, 2)
        with pytest.raises(ValueError):
            extract_patch(image, prior, (4, 0, 0), PatchGeometry((2, 2, 2), 1), 1)

    def test_channels_shape(self, unit_spacing):
        image = random_volume(np.random.default_rng(0), (8, 8, 8))
        prior = LabelMap(np.ones((8, 8, 8), dtype=np.uint8), unit_spacing, 2)
        p = extract_patch(image, prior, (4, 4, 4), PatchGeometry((4, 6, 2), 1), 1)
        assert p.channels().shape == (2, 4, 6, 2)


class TestExtractBox:
    def test_fill_value(self):
        a = np.ones((3, 3, 3), dtype=np.float32)
        out = extract_box(a, (0, 0, 0), (3, 3, 3), fill=7.0)
        assert out[0, 0, 0] == 7.0
        assert out[1, 1, 1] == 1.0


class TestFusion:
    def test_single_full_patch_is_argmax(self, unit_spacing):
        gen = np.random.default_rng(5)
        labels = random_labelmap(gen, (6, 6, 6), 4)
        probs = one_hot_encode(labels).probs
        fused = fuse_majority_vote([(probs, (2, 2, 2))], (6, 6, 6), 4)
        np.testing.assert_array_equal(fused, labels.labels)

    def test_vote_2_2_1(self):
        def const_patch(cls, c=3):
            p = np.zeros((c, 2, 2, 2), dtype=np.float32)
            p[cls] = 1.0
            return p

        preds = [(const_patch(2), (0, 0, 0)), (const_patch(2), (0, 0, 0)), (const_patch(1), (0, 0, 0))]
        fused = fuse_majority_vote(preds, (2, 2, 2), 3)
        assert np.all(fused == 2)

    def test_uncovered_is_background(self):
        p = np.zeros((2, 1, 1, 1), dtype=np.float32)
        p[1] = 1.0
        fused = fuse_majority_vote([(p, (0, 0, 0))], (3, 3, 3), 2)
        assert fused[0, 0, 0] == 1
        assert fused[2, 2, 2] == 0

    def test_tie_lowest_class(self):
        a = np.zeros((3, 1, 1, 1), dtype=np.float32)
        a[2] = 1.0
        b = np.zeros((3, 1, 1, 1), dtype=np.float32)
        b[1] = 1.0
        fused = fuse_majority_vote([(a, (0, 0, 0)), (b, (0, 0, 0))], (1, 1, 1), 3)
        assert fused[0, 0, 0] == 1

    def test_permutation_invariance(self, unit_spacing):
        gen = np.random.default_rng(6)
        preds = []
        for _ in range(10):
            probs = gen.random((3, 3, 3, 3)).astype(np.float32)
            probs /= probs.sum(axis=0, keepdims=True)
            center = tuple(int(c) for c in gen.integers(0, 6, size=3))
            preds.append((probs, center))
        a = fuse_majority_vote(preds, (6, 6, 6), 3)
        b = fuse_majority_vote(preds[::-1], (6, 6, 6), 3)
        np.testing.assert_array_equal(a, b)

    def test_grid_oracle_reconstruction(self, unit_spacing):
        gen = np.random.default_rng(7)
        for _ in range(20):
            dims = tuple(int(d) for d in gen.integers(6, 14, size=3))
            labels = random_labelmap(gen, dims, 4)
            onehot = one_hot_encode(labels).probs
            patch_dims = (4, 4, 4)
            preds = []
            for center in grid_centers(dims, patch_dims):
                box = np.stack([extract_box(onehot[c], center, patch_dims) for c in range(4)])
                preds.append((box, center))
            fused = fuse_majority_vote(preds, dims, 4)
            np.testing.assert_array_equal(fused, labels.labels)

    def test_vote_counts_match_box_membership(self):
        gen = np.random.default_rng(8)
        dims = (7, 6, 5)
        patch_dims = (3, 4, 2)
        centers = [tuple(int(gen.integers(0, dims[a])) for a in range(3)) for _ in range(12)]
        # every patch votes class 1 everywhere, so fused==1 exactly on covered voxels
        fg = np.zeros((2,) + patch_dims, dtype=np.float32)
        fg[1] = 1.0
        fused = fuse_majority_vote([(fg, c) for c in centers], dims, 2)
        covered = np.zeros(dims, dtype=bool)
        for c in centers:
            lo = [c[a] - (patch_dims[a] - 1) // 2 for a in range(3)]
            for x in range(max(lo[0], 0), min(lo[0] + patch_dims[0], dims[0])):
                for y in range(max(lo[1], 0), min(lo[1] + patch_dims[1], dims[1])):
                    for z in range(max(lo[2], 0), min(lo[2] + patch_dims[2], dims[2])):
                        covered[x, y, z] = True
        np.testing.assert_array_equal(fused == 1, covered)

    def test_empty_predictions_raise(self):
        with pytest.raises(ValueError):
            fuse_majority_vote([], (2, 2, 2), 2)


def test_grid_centers_cover_volume():
    gen = np.random.default_rng(9)
    for _ in range(30):
        dims = tuple(int(d) for d in gen.integers(3, 20, size=3))
        patch_dims = tuple(int(d) for d in gen.integers(2, 8, size=3))
        covered = np.zeros(dims, dtype=bool)
        for c in grid_centers(dims, patch_dims):
            lo = [c[a] - (patch_dims[a] - 1) // 2 for a in range(3)]
            sl = tuple(slice(max(lo[a], 0), min(lo[a] + patch_dims[a], dims[a])) for a in range(3))
            covered[sl] = True
        assert covered.all()
