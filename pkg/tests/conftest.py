from __future__ import annotations

import numpy as np
import pytest

from contrastmix.core import LabelMap, Spacing, Volume


@pytest.fixture
def unit_spacing():
    return Spacing(1.0, 1.0, 1.0)


@pytest.fixture
def ct_spacing():
    return Spacing(0.68, 0.68, 3.0)


def random_labelmap(gen: np.random.Generator, dims, num_classes, spacing=Spacing(1.0, 1.0, 1.0)) -> LabelMap:
    return LabelMap(gen.integers(0, num_classes, size=dims).astype(np.uint8), spacing, num_classes)


def random_volume(gen: np.random.Generator, dims, spacing=Spacing(1.0, 1.0, 1.0)) -> Volume:
    return Volume(gen.random(dims).astype(np.float32), spacing)


def random_simplex(gen: np.random.Generator, shape) -> np.ndarray:
    a = gen.random(shape) + 1e-3
    return a / a.sum(axis=0, keepdims=True)
