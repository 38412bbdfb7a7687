"""Named, splittable counter-based random streams.

Every consumer asks for a stream by a path such as ``(seed, "data", client_id, index)``.
Paths are turned into a ``SeedSequence`` spawn key, so streams are independent of the
order in which they are created.
"""
import zlib
from typing import Union

import numpy as np

PathPart = Union[int, str]


def _key(part: PathPart) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream path parts must be non-negative, got {part}")
    return int(part)


def derive_seed(seed: int, *path: PathPart) -> int:
    """64-bit seed of the stream at ``path``; recorded as provenance on generated data."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def generator(seed_used: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed_used)))


def stream(seed: int, *path: PathPart) -> np.random.Generator:
    return generator(derive_seed(seed, *path))
