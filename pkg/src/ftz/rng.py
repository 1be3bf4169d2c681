"""Deterministic random streams: splitmix64 seeding a xoshiro256** generator."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from . import kernels

_MASK = (1 << 64) - 1
_TWO_M53 = 2.0**-53


def derive_seed(seed: int, *labels) -> int:
    """Deterministically derive a child seed from ``seed`` and a label path."""
    h = hashlib.sha256(str(int(seed) & _MASK).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """xoshiro256** stream whose 256-bit state is expanded from a u64 seed by splitmix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.state = np.empty(4, dtype=np.uint64)
        kernels.splitmix64_fill(np.uint64(self.seed), self.state)

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            kernels.xoshiro_fill(self.state, out)
        return out

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits of each output."""
        n = math.prod(shape) if shape else 1
        vals = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return vals.reshape(shape) if shape else vals[0]

    def uniform(self, low, high, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), std=1.0) -> np.ndarray:
        """Box-Muller transform over pairs of uniforms."""
        n = math.prod(shape) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.random((m,))  # (0, 1], safe for log
        u2 = self.random((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = std * z
        return z.reshape(shape) if shape else z[0]

    def integers(self, n: int, size=None):
        """Uniform ints in [0, n) via multiply-shift on 53-bit uniforms."""
        if n <= 0:
            raise ValueError("integers() needs n >= 1")
        if size is None:
            return int(self.random() * n)
        return np.floor(self.random((size,)) * n).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.random((n - 1,))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(len(seq))]
