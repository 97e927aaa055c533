"""Parameter-free sinusoidal encoding of ``(n, l, k)`` token positions.

``model_dim`` is split into three equal blocks, one per coordinate; inside a
block, even slots hold ``sin(x * w_j)`` and odd slots ``cos(x * w_j)`` with
``w_j = base ** (-2j / block_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PositionEncodingConfig:
    model_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.model_dim <= 0 or self.model_dim % 6:
            raise ConfigError(f"model_dim must be a positive multiple of 6, got {self.model_dim}")
        if not self.base > 0:
            raise ConfigError(f"base must be positive, got {self.base}")

    @property
    def block_dim(self) -> int:
        return self.model_dim // 3


def _frequencies(cfg: PositionEncodingConfig) -> np.ndarray:
    half = cfg.block_dim // 2
    return cfg.base ** (-2.0 * np.arange(half) / cfg.block_dim)


def encode_batch(positions: Sequence[Sequence[int]] | np.ndarray, cfg: PositionEncodingConfig) -> np.ndarray:
    """Encode many positions at once; row ``i`` encodes ``positions[i]``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if (pos < 0).any():
        raise ConfigError("position coordinates must be non-negative")
    freqs = _frequencies(cfg)
    out = np.empty((pos.shape[0], cfg.model_dim), dtype=np.float64)
    for axis in range(3):
        angles = pos[:, axis : axis + 1] * freqs[None, :]
        block = out[:, axis * cfg.block_dim : (axis + 1) * cfg.block_dim]
        block[:, 0::2] = np.sin(angles)
        block[:, 1::2] = np.cos(angles)
    return out


def encode_position(pos: Sequence[int], cfg: PositionEncodingConfig) -> np.ndarray:
    return encode_batch([pos], cfg)[0]
