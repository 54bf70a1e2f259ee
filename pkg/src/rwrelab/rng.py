"""Reproducible random streams.

Every random quantity is drawn from a named sub-stream of a master seed.
A stream is identified by the tuple ``(master_seed, *names)``; string names
are mapped to integers with CRC32 and the tuple is used as the spawn key of
a :class:`numpy.random.SeedSequence`.  The bit generator is Philox, which is
counter based, so streams never overlap and adding a stream (or a worker)
does not perturb any other stream.
"""
from __future__ import annotations

import zlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]


def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("stream ids must be non-negative")
        return int(name)
    return zlib.crc32(str(name).encode("utf8"))


def stream(master_seed: int, *names) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of ``master_seed``."""
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=tuple(_name_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed: SeedLike, *names) -> np.random.Generator:
    """Turn an int seed (plus optional sub-stream names) or a Generator into a Generator.

    A Generator is returned unchanged (names are ignored), so callers can pass
    either a master seed or an already-split stream.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    if seed is None:
        raise ValueError("an explicit seed is required")
    return stream(int(seed), *names)


def int_seed(rng: np.random.Generator) -> int:
    """Draw a 31-bit integer seed, used to seed compiled kernels."""
    return int(rng.integers(0, 2**31 - 1))
