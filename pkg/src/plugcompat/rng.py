"""xoshiro256** generator with SplitMix64 seeding.

Everything random in the package flows through :class:`Rng` so that a
(seed, config) pair reproduces the same bits on any platform:

* state: four u64 words filled by SplitMix64 from the 64-bit seed;
* uniform doubles: ``(next_u64 >> 11) * 2**-53`` in [0, 1);
* normals: Box-Muller on two uniforms, ``u1`` mapped to (0, 1] via ``1 - u``,
  both outputs of a pair consumed in order;
* bounded integers: rejection sampling on the top bits;
* child streams: :func:`derive_seed` hashes (seed, *labels) with SHA-256.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64(state):
    """Return (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed, *labels):
    h = hashlib.sha256(str(int(seed) & MASK64).encode())
    for label in labels:
        h.update(b"\x00")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = words
        self._spare = None

    def child(self, *labels):
        return Rng(derive_seed(self.seed, *labels))

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, std=1.0):
        n = int(np.prod(shape)) if shape != () else 1
        vals = [self.normal() for _ in range(n)]
        return (np.array(vals, dtype=np.float64) * std).reshape(shape)

    def uniforms(self, shape):
        n = int(np.prod(shape)) if shape != () else 1
        return np.array([self.random() for _ in range(n)], dtype=np.float64).reshape(shape)

    def integer(self, n):
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        if n == 1:
            return 0
        bits = (n - 1).bit_length()
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def choice(self, n, k):
        """k distinct indices from range(n), in draw order."""
        return self.permutation(n)[:k]

    def unit_vector(self, dim):
        v = self.normals((dim,))
        return v / np.linalg.norm(v)
