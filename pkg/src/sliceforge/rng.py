"""Counter-based deterministic random streams.

Every random decision in the package (weight init, shuffling, dropout masks,
augmentation offsets, synthetic data) is drawn from a stream keyed by an
explicit integer tuple, e.g. ``(seed, TAG_DROPOUT, epoch, sample_index)``.
Draw i of a stream is a pure function of (key, i), built on the SplitMix64
mixing function, so results are independent of execution order and identical
across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_KEY_BASE = 0x8A5CD789635D2DFF

# Domain tags keep streams for distinct purposes disjoint even when the
# remaining key components collide.
TAG_INIT = 1
TAG_SHUFFLE = 2
TAG_DROPOUT = 3
TAG_AUGMENT = 4
TAG_SYNTH = 5
TAG_SPLIT = 6
TAG_MAXIMIZE = 7


def mix64(x: int) -> int:
    """SplitMix64 finalizer: scramble a 64-bit integer."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


class SplitMixStream:
    """Sequential stream of draws derived from an integer key tuple."""

    def __init__(self, *key: int):
        k = _KEY_BASE
        for part in key:
            k = mix64((k + (int(part) & _MASK64)) & _MASK64)
        self._key = k
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words."""
        counters = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        state = np.uint64(self._key) + counters * np.uint64(_GOLDEN)
        return _mix64_array(state)

    def uniform(self, shape=()) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)) * (2.0 ** -53)
        return float(u[0]) if shape == () else u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray | float:
        """Standard normal draws via the Box-Muller transform."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        # u1 in (0, 1] so the log is finite.
        u1 = ((self.raw(half) >> np.uint64(11)) + np.uint64(1)) * (2.0 ** -53)
        u2 = (self.raw(half) >> np.uint64(11)) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return float(z[0]) if shape == () else z.reshape(shape)

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive.

        Modulo reduction of a 64-bit word; bias is below 2**-40 for any range
        used here.
        """
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        return low + int(self.raw(1)[0] % np.uint64(span))

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_weighted(self, values, weights) -> object:
        """Pick one value with the given relative weights."""
        total = float(sum(weights))
        u = self.uniform() * total
        acc = 0.0
        for value, weight in zip(values, weights):
            acc += weight
            if u < acc:
                return value
        return values[-1]
