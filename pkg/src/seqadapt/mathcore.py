"""Numerical primitives shared by every other module.

Everything is float64. The random generator is xoshiro256** seeded through
splitmix64, implemented here so that streams do not depend on numpy's
generator internals or on the platform.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable

import numpy as np

MASK64 = (1 << 64) - 1


def log_sum_exp(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input to log_sum_exp")
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def log_sum_exp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise stabilized log-sum-exp of a 2-D array."""
    m = np.max(a, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input to softmax")
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=-1, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f`` maps a flat parameter vector to ``(value, gradient)``. The error per
    coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64).ravel()
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise ValueError("f(x) is not finite")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite f near coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** generator; one owner mutates it."""

    algorithm = "xoshiro256**/splitmix64"

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        self.s = s

    def derive(self, label: str) -> "Rng":
        """Independent stream keyed by this generator's seed and a label."""
        key = zlib.crc32(label.encode("utf-8"))
        _, mixed = _splitmix64(self.seed ^ (key << 17))
        return Rng(mixed)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n > 0")
        # rejection sampling keeps the draw exactly uniform
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self, n: int) -> np.ndarray:
        out = np.empty(n)
        for k in range(n):
            u1 = 1.0 - self.random()
            u2 = self.random()
            out[k] = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return out

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def categorical(self, probs: np.ndarray) -> int:
        return self.from_cdf(np.cumsum(probs))

    def from_cdf(self, cdf: np.ndarray) -> int:
        """Index drawn with probability proportional to the increments of ``cdf``."""
        k = int(np.searchsorted(cdf, self.random() * cdf[-1], side="right"))
        return min(k, len(cdf) - 1)


def rng_uniform(rng: Rng, lo: float, hi: float, n: int) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"rng_uniform needs lo < hi, got {lo} >= {hi}")
    out = np.empty(n)
    width = hi - lo
    for k in range(n):
        x = lo + width * rng.random()
        # rounding can land exactly on hi when the interval is tiny
        out[k] = x if x < hi else math.nextafter(hi, lo)
    return out
