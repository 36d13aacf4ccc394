"""Deterministic counter-based PRNG (splitmix64 mixing).

Every draw is a pure function of (seed, counter), so repeated runs with the
same seed are bit-identical and independent streams can be split off without
coordination. All stochastic operations in the package take an explicit
``Rng`` instead of touching global state.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


class Rng:
    """Seeded deterministic random stream."""

    def __init__(self, seed: int):
        self._seed = _mix(np.asarray(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
        self._count = 0

    def spawn(self, stream: int) -> "Rng":
        """Derive an independent child stream identified by ``stream``."""
        child = Rng(0)
        child._seed = _mix(self._seed ^ _mix(np.asarray(stream, dtype=np.uint64) + _GOLDEN))
        return child

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.raw(n) >> _U64(11)) * (2.0 ** -53)

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """``n`` ints uniform on [low, high] inclusive."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = np.uint64(high - low + 1)
        return (self.raw(n) % span).astype(np.int64) + low

    def randint(self, low: int, high: int) -> int:
        """One int uniform on [low, high] inclusive."""
        return int(self.integers(1, low, high)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n)."""
        return np.argsort(self.raw(n), kind="stable")
