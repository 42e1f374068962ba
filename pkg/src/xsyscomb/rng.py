"""Portable pseudo-random streams.

Every stream is a bank of ``LANES`` independent xoshiro256** generators whose
256-bit states are filled from a SplitMix64 sequence.  Lanes are stepped in
lock-step with numpy uint64 arithmetic and their outputs are consumed in
lane order through a buffer, so the produced sequence depends only on the
seed and never on how callers chunk their requests.

Sub-streams are derived by name: ``Stream(seed).child("tdnn/init")`` hashes
the name with FNV-1a 64 and mixes it into the parent key with SplitMix64.
"""
from __future__ import annotations

import math

import numpy as np

LANES = 1024
MASK64 = (1 << 64) - 1

_U = np.uint64


def splitmix64(x: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit seed for the sub-stream ``name`` of ``seed``."""
    _, out = splitmix64((seed & MASK64) ^ fnv1a64(name))
    return out


def _splitmix64_block(state: int, n: int) -> np.ndarray:
    """The first ``n`` SplitMix64 outputs from ``state``, vectorized."""
    with np.errstate(over="ignore"):
        z = _U(state) + np.arange(1, n + 1, dtype=np.uint64) * _U(0x9E3779B97F4A7C15)
        z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
        return z ^ (z >> _U(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U(k)) | (x >> _U(64 - k))


class Stream:
    """A named, seeded source of uniform, normal and integer draws."""

    def __init__(self, seed: int, name: str = ""):
        self.seed = seed & MASK64
        self.name = name
        key = derive_seed(self.seed, name) if name else self.seed
        s = _splitmix64_block(key, 4 * LANES).reshape(LANES, 4).T.copy()
        # all-zero lane state is a fixed point of xoshiro
        s[0, np.all(s == 0, axis=0)] = _U(1)
        self._s = s
        self._buf = np.empty(0, dtype=np.uint64)

    def child(self, name: str) -> "Stream":
        full = f"{self.name}/{name}" if self.name else name
        return Stream(self.seed, full)

    def _step(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s1 * _U(5), 7) * _U(9)
        t = s1 << _U(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        chunks = [self._buf]
        have = self._buf.size
        while have < n:
            block = self._step()
            chunks.append(block)
            have += block.size
        allv = np.concatenate(chunks)
        self._buf = allv[n:]
        return allv[:n]

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high) with 53-bit resolution."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> _U(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws by the Box-Muller transform (both outputs used)."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        raw = self.next_u64(2 * m)
        u1 = ((raw[:m] >> _U(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
        u2 = (raw[m:] >> _U(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * math.pi * u2), rad * np.sin(2 * math.pi * u2)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, (1,))[0])

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; stable sort makes ties deterministic
        return np.argsort(self.uniform((n,)), kind="stable")

    def keep_mask(self, keep: float, shape) -> np.ndarray:
        """Bernoulli(keep) mask as float64 zeros and ones."""
        n = int(np.prod(shape, dtype=np.int64))
        threshold = _U(min(int(keep * 2.0**64), MASK64))
        return (self.next_u64(n) < threshold).astype(np.float64).reshape(shape)
