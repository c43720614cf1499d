"""Keyed random streams.

Every stochastic choice in the package (camera placement, ray jitter,
dropout masks, batch sampling) draws from a stream derived from an
explicit key, so results never depend on call order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def derive_key(*parts) -> int:
    """Fold any mix of ints and strings into a 64-bit key."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, (int, np.integer)):
            h.update(b"i" + int(p).to_bytes(16, "little", signed=True))
        elif isinstance(p, str):
            h.update(b"s" + p.encode() + b"\0")
        else:
            raise TypeError(f"key parts must be int or str, got {type(p).__name__}")
    return int.from_bytes(h.digest(), "little")


def generator(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_key(*parts)))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_uniform(key: int, counters: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) values indexed by integer counters under ``key``.

    Value ``i`` depends only on ``(key, counters[i])``, which is what makes
    per-ray jitter independent of how rays are batched.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = _splitmix64(c ^ _splitmix64(np.full(c.shape, key & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)))
        x = _splitmix64(x + np.uint64(key >> 1 & 0x7FFFFFFFFFFFFFFF))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
