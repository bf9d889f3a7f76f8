"""Portable, stream-keyed random number generation.

Every stochastic component of the pipeline draws from a Philox
counter-based generator keyed by (seed, purpose tag, index).  Philox is
a pure integer counter cipher, so identical keys give identical streams
on every platform, and independent purposes/subjects never share a
stream.  Gaussians are produced by Box-Muller on top of the raw uniform
stream so the distribution code path has no library-dependent branches.
"""

from __future__ import annotations

import numpy as np


def _tag_hash(tag: str) -> int:
    """64-bit FNV-1a of a purpose tag."""
    h = 0xCBF29CE484222325
    for byte in tag.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Generator for one (seed, purpose, index) stream."""
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64((_tag_hash(tag) + index) & 0xFFFFFFFFFFFFFFFF)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def normal(gen: np.random.Generator, size, sigma: float = 1.0) -> np.ndarray:
    """Zero-mean Gaussian draws via Box-Muller."""
    n = int(np.prod(size)) if not np.isscalar(size) else int(size)
    m = (n + 1) // 2
    # 1 - random() keeps u1 in (0, 1] so the log is finite.
    u1 = 1.0 - gen.random(m)
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
    return (sigma * z).reshape(size)
