"""Rotary time embedding: per-level rotary transforms of queries and keys.

Vectors are rotated pairwise over interleaved dimensions ``(2i, 2i+1)``. Each
temporal level (year, month, day) has its own inverse-frequency spectrum and
the three rotated copies are combined by a weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calendar_time import TemporalTriplet

LEVELS = ("y", "m", "d")


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class RoTEConfig:
    head_dim: int
    base_y: float = 1e6
    base_m: float = 1e4
    base_d: float = 1e2
    alpha_y: float = 1.5
    alpha_m: float = 1.0
    alpha_d: float = 0.5

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be even and >= 2, got {self.head_dim}")
        for name in ("base_y", "base_m", "base_d"):
            if not getattr(self, name) > 1:
                raise ConfigError(f"{name} must be > 1, got {getattr(self, name)}")

    def base(self, level: str) -> float:
        return getattr(self, f"base_{level}")

    def alpha(self, level: str) -> float:
        return getattr(self, f"alpha_{level}")


def inverse_frequencies(base: float, head_dim: int) -> np.ndarray:
    """``base ** (-2i / head_dim)`` for ``i < head_dim / 2``, in float64."""
    if head_dim < 2 or head_dim % 2:
        raise ConfigError(f"head_dim must be even and >= 2, got {head_dim}")
    if not base > 1:
        raise ConfigError(f"base must be > 1, got {base}")
    exponents = -np.arange(0, head_dim, 2, dtype=np.float64) / head_dim
    return np.power(float(base), exponents)


def rotation_angles(value, inv_freq: np.ndarray) -> np.ndarray:
    """Angles ``value * inv_freq``; ``value`` may be a scalar or an array.

    Array input of shape ``S`` gives output ``S + (len(inv_freq),)``.
    """
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("temporal value must be non-negative")
    return v[..., None] * inv_freq


def rotate_half(x: np.ndarray) -> np.ndarray:
    """``(x0, x1, x2, x3, ...) -> (-x1, x0, -x3, x2, ...)`` over the last axis."""
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise DimensionError(f"rotate_half needs an even last dimension, got {x.shape[-1]}")
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def cos_sin(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin tables with each angle repeated over its dimension pair."""
    full = np.repeat(np.asarray(angles, dtype=np.float64), 2, axis=-1)
    return np.cos(full), np.sin(full)


def apply_rotary_cs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + rotate_half(x) * sin


def apply_rotary(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    angles = np.asarray(angles)
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise DimensionError(
            f"vector of length {x.shape[-1]} does not match {angles.shape[-1]} angles"
        )
    cos, sin = cos_sin(angles)
    return apply_rotary_cs(x, cos, sin)


def _triplet_array(triplets) -> np.ndarray:
    arr = np.asarray(triplets, dtype=np.int64)
    if arr.shape[-1] != 3:
        raise DimensionError(f"triplets must have a trailing axis of 3, got {arr.shape}")
    return arr


def level_tables(
    triplets, cfg: RoTEConfig, levels: Sequence[str] = LEVELS
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """``(alpha, cos, sin)`` per active level; tables have shape ``S + (head_dim,)``."""
    arr = _triplet_array(triplets)
    tables = []
    for level in levels:
        values = arr[..., LEVELS.index(level)]
        theta = rotation_angles(values, inverse_frequencies(cfg.base(level), cfg.head_dim))
        tables.append((cfg.alpha(level), *cos_sin(theta)))
    return tables


def fuse_tables(x: np.ndarray, tables) -> np.ndarray:
    """Weighted sum of independently rotated copies of ``x``."""
    rot = rotate_half(x)
    out = np.zeros(np.broadcast_shapes(x.shape, tables[0][1].shape), dtype=np.result_type(x, tables[0][1]))
    for alpha, cos, sin in tables:
        out += alpha * (x * cos + rot * sin)
    return out


def fuse_levels(x: np.ndarray, triplet: TemporalTriplet, cfg: RoTEConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != cfg.head_dim:
        raise DimensionError(f"expected length {cfg.head_dim}, got {x.shape[-1]}")
    return fuse_tables(x, level_tables(triplet, cfg))


def rote_transform_qk(Q: np.ndarray, K: np.ndarray, triplets, cfg: RoTEConfig):
    """Time-fused queries and keys, one triplet per row. Values are never touched."""
    Q = np.asarray(Q)
    K = np.asarray(K)
    arr = _triplet_array(triplets)
    if Q.shape != K.shape or Q.ndim != 2 or Q.shape[0] != arr.shape[0]:
        raise DimensionError(
            f"Q {Q.shape}, K {K.shape} and {arr.shape[0]} triplets disagree"
        )
    if Q.shape[1] != cfg.head_dim:
        raise DimensionError(f"head_dim {cfg.head_dim} does not match width {Q.shape[1]}")
    tables = level_tables(arr, cfg)
    return fuse_tables(Q, tables), fuse_tables(K, tables)
