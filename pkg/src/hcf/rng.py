"""Named, splittable random streams.

Every stochastic routine in the package takes a :class:`Stream` explicitly;
there is no module-level generator. Streams are backed by numpy's Philox
counter-based bit generator, keyed by ``(seed, path)`` where ``path`` is the
sequence of names used to split down from the root.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[str, int]

_STR_OFFSET = 1 << 32


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    # string keys live above the integer range so "3" and 3 never collide
    return _STR_OFFSET + zlib.crc32(str(key).encode("utf-8"))


class Stream:
    """A reproducible random stream identified by a seed and a split path."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: Key) -> "Stream":
        """Child stream; depends only on (seed, path, keys), never on draws made so far."""
        return Stream(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def spawn(self, n: int) -> list["Stream"]:
        return [self.split("spawn", i) for i in range(n)]

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def exponential(self, scale=1.0, size=None) -> np.ndarray:
        return self._gen.exponential(scale, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={self.path})"
