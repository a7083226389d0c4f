"""Seeded random streams.

Every random draw in the package goes through a counter-based Philox
generator keyed by an integer seed plus a tuple of names, so that two
consumers asking for the same (seed, names) get the same stream no matter
what else ran before them.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be nonnegative integers or strings")
        return int(part)
    if isinstance(part, float):
        # grid values such as kappa=0.33 are used as keys
        return zlib.crc32(repr(part).encode())
    return zlib.crc32(str(part).encode())


def make_rng(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def check_random_state(rng) -> np.random.Generator:
    """Coerce ``None``, an int seed or a Generator into a Generator."""
    if rng is None:
        return np.random.default_rng()
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return make_rng(int(rng))
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")
