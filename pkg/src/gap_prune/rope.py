"""Position IDs and rotary position embedding.

Pairing convention: dimension ``2j`` is rotated together with ``2j + 1``
(interleaved) by angle ``pos * theta_base ** (-2j / head_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Matrix


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    num_heads: int = 1
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be even and positive, got {self.head_dim}")
        if self.theta_base <= 1:
            raise ConfigError(f"theta_base must exceed 1, got {self.theta_base}")
        if self.num_heads <= 0:
            raise ConfigError("num_heads must be positive")

    def inv_freq(self) -> np.ndarray:
        j = np.arange(0, self.head_dim, 2, dtype=np.float64)
        return self.theta_base ** (-j / self.head_dim)


def sequential_ids(start: int, count: int) -> np.ndarray:
    if count < 0:
        raise ValueError("count must be non-negative")
    return np.arange(start, start + count, dtype=np.int64)


def rope_angles(ids, cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(len(ids), head_dim // 2)``."""
    ang = np.outer(np.asarray(ids, dtype=np.float64), cfg.inv_freq())
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Matrix, ids, cfg: RopeConfig) -> Matrix:
    """Rotate each row of ``x`` (one token's head vector) by its position id."""
    ids = np.asarray(ids)
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"x has {x.shape[-1]} columns, head_dim is {cfg.head_dim}")
    if x.shape[-2] != ids.shape[0]:
        raise ValueError(f"{x.shape[-2]} token rows but {ids.shape[0]} position ids")
    cos, sin = rope_angles(ids, cfg)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_logit(q, k, m: int, n: int, cfg: RopeConfig) -> float:
    """Dot product of ``q`` rotated to position ``m`` with ``k`` rotated to ``n``."""
    qr = apply_rope(np.asarray(q, dtype=np.float64)[None, :], [m], cfg)[0]
    kr = apply_rope(np.asarray(k, dtype=np.float64)[None, :], [n], cfg)[0]
    return float(qr @ kr)
