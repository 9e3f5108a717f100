"""Counter-based splitmix64 generator.

Output ``i`` of a stream is ``mix(seed + (i + 1) * GAMMA)``, so the sequence
depends only on the seed and the number of values drawn so far. No
platform generator is involved.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import _kernels
from .errors import ParameterError

_MASK64 = (1 << 64) - 1
_INV53 = 1.0 / (1 << 53)


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    @classmethod
    def derive(cls, seed: int, *keys) -> "Rng":
        """Independent stream named by ``keys`` (ints or strings) under ``seed``."""
        h = hashlib.blake2b(digest_size=8)
        h.update(str(int(seed) & _MASK64).encode())
        for k in keys:
            h.update(b"\x1f")
            h.update(str(k).encode())
        return cls(int.from_bytes(h.digest(), "little"))

    def spawn(self, *keys) -> "Rng":
        return Rng.derive(self.seed, self.counter, *keys)

    def bits(self, n: int) -> np.ndarray:
        out = _kernels.splitmix64(self.seed, self.counter, int(n))
        self.counter += int(n)
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1) with 53 random bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * _INV53
        return float(u[0]) if size is None else u.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high)."""
        if high < 1:
            raise ParameterError(f"integers: high must be >= 1, got {high}")
        u = self.random(1 if size is None else size)
        k = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(k.reshape(-1)[0]) if size is None else k

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from range(n), in draw order."""
        if not 0 <= k <= n:
            raise ParameterError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1], keeps log finite
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
        return z[:n].reshape(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return low + (high - low) * self.random(size)
