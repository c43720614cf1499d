"""Input encodings for the MLP radiance field.

``pe`` and ``spe`` share one sinusoidal feature map; ``spe`` differs only
in the first-layer activation of the MLP that consumes it. ``hash`` is a
multiresolution grid whose corners are looked up through an XOR spatial
hash, collisions included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

HASH_PRIMES = (1, 2654435761, 805459861)
ENCODING_KINDS = ("pe", "spe", "hash")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    kind: str = "pe"
    n_freqs: int = 6
    hash_resolutions: tuple[int, ...] = (4, 8, 16, 32)
    log2_table_size: int = 10
    features_per_level: int = 2

    def __post_init__(self):
        if self.kind not in ENCODING_KINDS:
            raise ConfigError(f"unknown encoding kind {self.kind!r}")
        if self.kind in ("pe", "spe") and not 1 <= self.n_freqs <= 12:
            raise ConfigError("frequency band count L must lie in [1, 12]")
        if self.kind == "hash":
            if not 8 <= self.log2_table_size <= 16:
                raise ConfigError("hash table size must be a power of two in [2^8, 2^16]")
            res = tuple(int(r) for r in self.hash_resolutions)
            if len(res) == 0 or any(b <= a for a, b in zip(res, res[1:])) or res[0] < 1:
                raise ConfigError("hash level resolutions must be positive and strictly increasing")
            if self.features_per_level < 1:
                raise ConfigError("need at least one feature per hash level")
            object.__setattr__(self, "hash_resolutions", res)

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def n_levels(self) -> int:
        return len(self.hash_resolutions)

    @property
    def width(self) -> int:
        if self.kind == "hash":
            return self.n_levels * self.features_per_level
        return 3 + 6 * self.n_freqs

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_freqs": self.n_freqs,
            "hash_resolutions": list(self.hash_resolutions),
            "log2_table_size": self.log2_table_size,
            "features_per_level": self.features_per_level,
        }


def pe_features(p: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """[p, sin(2^l pi p), cos(2^l pi p) for l < L] along the last axis."""
    feats = [p]
    for level in range(n_freqs):
        arg = (2.0**level * np.pi) * p
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-1)


def encode_pe(p, n_freqs: int) -> np.ndarray:
    """Positional encoding of one or more points (width 3 + 6L)."""
    if not 1 <= n_freqs <= 12:
        raise ConfigError("frequency band count L must lie in [1, 12]")
    t = torch.as_tensor(np.asarray(p, dtype=np.float64))
    return pe_features(t, n_freqs).numpy()


def encode_spe(p, n_freqs: int) -> np.ndarray:
    """Same features as :func:`encode_pe`; the sinusoidal activation lives in the MLP."""
    return encode_pe(p, n_freqs)


def hash_slots(corners: torch.Tensor, table_size: int) -> torch.Tensor:
    """XOR hash of integer grid corners (..., 3) into [0, table_size).

    Multiplies wrap at 32 bits, as in the usual uint32 implementation.
    """
    c = corners.to(torch.int64)
    h = (c[..., 0] * HASH_PRIMES[0]) & 0xFFFFFFFF
    h = h ^ ((c[..., 1] * HASH_PRIMES[1]) & 0xFFFFFFFF)
    h = h ^ ((c[..., 2] * HASH_PRIMES[2]) & 0xFFFFFFFF)
    return h & (table_size - 1)


_CORNER_OFFSETS = torch.tensor([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int64)


def hash_features(p: torch.Tensor, tables: torch.Tensor, config: EncodingConfig,
                  bound: float) -> torch.Tensor:
    """Trilinearly interpolated hash-grid features for points ``p`` (N, 3).

    ``tables`` has shape (levels, T, F). Points outside the cube
    [-bound, bound]^3 are clamped onto it.
    """
    u = ((p + bound) / (2.0 * bound)).clamp(0.0, 1.0)
    out = []
    for level, res in enumerate(config.hash_resolutions):
        x = u * res
        base = torch.floor(x).detach()
        frac = x - base
        corners = base.to(torch.int64)[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (N, 8, 3)
        slots = hash_slots(corners, config.table_size)
        w = torch.where(_CORNER_OFFSETS[None, :, :].bool(), frac[:, None, :], 1.0 - frac[:, None, :])
        w = w.prod(dim=-1)  # (N, 8)
        entries = tables[level][slots]  # (N, 8, F)
        out.append((w[..., None] * entries).sum(dim=1))
    return torch.cat(out, dim=-1)


def encode_hash(p, config: EncodingConfig, tables: np.ndarray, bound: float = 1.5) -> np.ndarray:
    """Hash-grid encoding of points ``p`` given table contents (levels, T, F)."""
    pt = torch.as_tensor(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    tt = torch.as_tensor(np.asarray(tables, dtype=np.float64))
    feats = hash_features(pt, tt, config, bound).numpy()
    return feats[0] if np.ndim(p) == 1 else feats


def encode(p: torch.Tensor, config: EncodingConfig, tables: torch.Tensor | None,
           bound: float) -> torch.Tensor:
    if config.kind == "hash":
        return hash_features(p, tables, config, bound)
    return pe_features(p, config.n_freqs)
