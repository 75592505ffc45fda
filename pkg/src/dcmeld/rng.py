"""Deterministic RNG stream derivation.

Every stochastic component draws from a counter-based (Philox) generator
keyed by the run seed plus a structured path such as
``(seed, "stage", 2, "move", rung)``.  Streams are therefore reproducible
for a fixed seed regardless of how work is scheduled across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def _path_entropy(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(*path: int | str) -> np.random.Generator:
    """Derive an independent generator for a seed path like (seed, "move", 3).

    The same path always yields the same stream; distinct paths yield
    streams that are independent for practical purposes.
    """
    if not path:
        raise ValueError("substream needs at least the run seed")
    entropy = tuple(_path_entropy(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
