"""
Seed splitting.

Every random stream in a run descends from the single global seed:
``child_seed(seed, *names)`` hashes the names with CRC-32 and feeds
``[seed, crc(name1), crc(name2), ...]`` to numpy's SeedSequence. A stream
therefore depends only on the global seed and its own path (for example
``("train", "cell-A", "init")``), never on the order in which other
streams were drawn or on how many workers ran concurrently.
"""
import zlib
from typing import Union

import numpy as np

Name = Union[str, int]


def _entropy(name: Name) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def child_seed(seed: int, *names: Name) -> int:
    """Deterministic 63-bit integer seed for the stream at ``names``"""
    sequence = np.random.SeedSequence([int(seed)] + [_entropy(n) for n in names])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1


def child_rng(seed: int, *names: Name) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [_entropy(n) for n in names]))
