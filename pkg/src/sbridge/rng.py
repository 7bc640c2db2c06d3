"""Seeded counter-based random streams.

Every stream is a Philox generator keyed by ``SeedSequence(seed, spawn_key=path)``.
Child streams are derived from the key path alone, so deriving a child never
consumes state from the parent and the same ``(seed, path)`` always yields the
same sequence.
"""

from __future__ import annotations

import copy

import numpy as np


class Rng:
    """A deterministic random stream identified by ``(seed, path)``."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    def child(self, *keys: int) -> Rng:
        """Independent stream for the given key path below this one."""
        return Rng(self.seed, self.path + tuple(keys))

    def clone(self) -> Rng:
        """Copy including the current position in the stream."""
        return copy.deepcopy(self)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_normal(rng: Rng, n: int) -> np.ndarray:
    """``n`` i.i.d. standard normal draws from ``rng``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)
