"""Deterministic RNG derivation.

Every random draw in the pipeline comes from a generator derived from
(root seed, string tag, *indices), so results never depend on execution
order or worker count.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Child generator for (seed, keys); string keys hash via crc32."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        else:
            entropy.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)
