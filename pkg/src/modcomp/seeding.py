"""Named RNG sub-streams.

Every random draw in the package flows from one top-level seed through
`substream(seed, *names)`. Names are hashed with crc32 (stable across runs and
platforms, unlike `hash`), so e.g. the "corpus" stream never collides with the
"init" stream and ablation runs at the same seed share data and initialization.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(seed: int, *names: str | int) -> list[int]:
    key = [int(seed)]
    for name in names:
        if isinstance(name, int):
            key.append(name)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return key


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Deterministic generator for (seed, names); independent across names."""
    return np.random.default_rng(np.random.SeedSequence(stream_key(seed, *names)))
