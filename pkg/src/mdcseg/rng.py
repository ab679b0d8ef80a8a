"""Deterministic PRNG used for every random draw in the repository.

SplitMix64 is the single generator: trivially portable, bit-exact across
platforms and languages. All consumers derive their own stream from a root
seed with a documented stream id so draw order in one subsystem never
shifts another. Bulk draws are vectorized but produce exactly the same
sequence as repeated scalar calls.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_WEYL = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream ids. Every random consumer derives from the root seed with one of
# these so subsystems stay independent.
STREAM_DATAGEN = 1
STREAM_NOISE = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4
STREAM_TRAIN = 5


class Rng:
    """SplitMix64 stream. state advances by the Weyl constant per draw."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _WEYL) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_u64_array(self, n: int) -> np.ndarray:
        """The next n outputs at once; identical to n next_u64() calls."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_WEYL)
        self.state = int(z[-1]) if n else self.state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_floats(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """n standard normals; identical to n normal() calls (Box-Muller
        cosine branch, two uniforms each)."""
        u = self.next_floats(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo reduction; bias is negligible
        for the small n used here and keeps the draw count at one."""
        if n <= 0:
            raise ValueError("randint requires n > 0")
        return self.next_u64() % n

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine branch). Consumes exactly
        two uniforms per call; the sine partner is discarded to keep draw
        accounting simple."""
        u1 = 1.0 - self.next_float()  # (0, 1], keeps log finite
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def derive(self, stream_id: int) -> "Rng":
        """Child stream: seeded with next_u64() xor stream_id."""
        return Rng(self.next_u64() ^ (stream_id & _MASK64))
