"""Deterministic, hierarchical random streams.

Every stochastic component in the package draws from a RandomSource.  Streams
form a tree: ``child(*path)`` derives an independent stream from the root seed
and the path, so the number of draws taken on one branch can never shift the
draws seen on another.  This is what makes checkpoint resume and parallel
evaluation reproducible without serializing generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RandomSource"]

_MASK64 = (1 << 64) - 1


def _as_word(part) -> int:
    """Map a path component (int, bool, or str) to a stable unsigned word."""
    if isinstance(part, bool):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream path component: {part!r}")


class RandomSource:
    """Seed-derived stream of uniform draws, permutations, and subsets.

    Identical (seed, path) always yields the identical draw sequence,
    independent of platform and of activity on sibling streams.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence([self.seed & _MASK64, *self._key])
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *path) -> "RandomSource":
        """Derive an independent stream for (seed, existing path, *path)."""
        return RandomSource(self.seed, self._key + tuple(_as_word(p) for p in path))

    # -- draws ----------------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, size=None, std: float = 1.0):
        return self.generator.normal(0.0, std, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def subset(self, n: int, m: int) -> np.ndarray:
        """Uniform m-subset of range(n), returned in ascending order."""
        if not 0 <= m <= n:
            raise ValueError(f"cannot draw {m} of {n} items without replacement")
        picked = self.generator.choice(n, size=m, replace=False)
        picked.sort()
        return picked

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, depth={len(self._key)})"
