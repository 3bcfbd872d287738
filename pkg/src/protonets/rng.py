"""SplitMix64: a small counter-based generator used for every random draw.

The stream for seed ``s`` is ``mix(s + k * GAMMA)`` for ``k = 1, 2, ...`` with
all arithmetic mod 2**64, where ``mix`` is the standard SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Because each output depends only on the counter, blocks of outputs can be
produced with vectorized numpy arithmetic and still match the scalar stream
bit for bit. Derived quantities:

* ``uniform()``      -> ``(u64 >> 11) * 2**-53`` in [0, 1)
* ``randbelow(n)``   -> rejection sampling on ``u64 % n`` (unbiased)
* ``normal()``       -> Box-Muller on two consecutive uniforms (cosine branch)
* ``split()``        -> a new generator seeded with the next ``u64``
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self) -> str:
        return f"SplitMix64(state={self.state:#018x})"

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array (same values as ``next_u64``)."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normal draws via Box-Muller; consumes 2 outputs per draw."""
        u = self.uniforms(2 * n).reshape(n, 2) if n > 0 else np.zeros((0, 2))
        u1 = 1.0 - u[:, 0]  # (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u[:, 1])

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())
