"""xoshiro256++ generator with splitmix64 seeding and Box-Muller normals.

numpy ships no xoshiro256++ bit generator, and the noise files we emit must be
reproducible from a seed alone, so the stream is defined here explicitly.
The state is an explicit object; nothing in the package touches global RNG.
"""

from __future__ import annotations

import numba
import numpy as np

_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def splitmix64(x: int) -> tuple[int, int]:
    """Return ``(next_state, output)`` of one splitmix64 step."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Mix integers into a single 64-bit seed (used to partition streams)."""
    h = 0x243F6A8885A308D3
    for p in parts:
        _, h = splitmix64((h ^ (int(p) & _MASK)) & _MASK)
    return h


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Xoshiro256pp:
    """xoshiro256++ (Blackman & Vigna) seeded through splitmix64."""

    def __init__(self, seed: int):
        x = int(seed) & _MASK
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self, size: int) -> np.ndarray:
        out = np.empty(int(size), dtype=np.uint64)
        _fill(self.state, out)
        return out

    def random(self, size: int) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on 53-bit uniforms."""
        return np.floor(self.random(size) * high).astype(np.int64)

    def normal(self, size: int) -> np.ndarray:
        """Standard normals via Box-Muller, two per pair of uniforms."""
        size = int(size)
        pairs = (size + 1) // 2
        raw = self.next_u64(2 * pairs) >> np.uint64(11)
        # u1 in (0, 1] keeps the log finite
        u1 = (raw[0::2].astype(np.float64) + 1.0) * 2.0**-53
        u2 = raw[1::2].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(_TWO_PI * u2)
        out[1::2] = r * np.sin(_TWO_PI * u2)
        return out[:size]
