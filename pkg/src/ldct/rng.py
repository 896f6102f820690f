"""Seeded random streams.

Every random draw in the package comes from a Philox counter-based
generator.  Sub-streams are derived from a root seed plus a path of names
and integers, hashed into the ``spawn_key`` of a ``SeedSequence``; the
derivation uses only CRC32 and integer arithmetic, so a given
``(seed, *path)`` yields the same stream on every platform.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def _key_part(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(part)
    if isinstance(part, float):
        part = repr(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(p) for p in path))


def make_rng(seed: int, *path) -> np.random.Generator:
    """Philox generator for the sub-stream ``path`` under ``seed``.

    >>> a = make_rng(7, "simulate", 0).standard_normal(3)
    >>> b = make_rng(7, "simulate", 0).standard_normal(3)
    >>> bool((a == b).all())
    True
    """
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for libraries that want a plain int."""
    lo, hi = seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return ((int(hi) & 0x7FFFFFFF) << 32) | int(lo)


def torch_generator(seed: int, *path) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *path))
    return g
