"""Deterministic RNG derivation.

All stochastic behaviour in the package flows from a single integer seed.
Independent consumers (init, shuffling, augmentation, ...) derive their own
`numpy` generator from the root seed plus a string tag and optional integer
coordinates, so streams never alias and any epoch can be replayed in
isolation (which is what makes checkpoint resume exact).
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, tag: str, *coords: int) -> np.random.Generator:
    """Return a generator keyed by ``(seed, tag, *coords)``.

    The tag is hashed with CRC-32 so the entropy pool only ever sees
    integers; the same inputs always yield the same stream.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]
    key.extend(int(c) & 0xFFFFFFFF for c in coords)
    return np.random.default_rng(key)
