"""Masked loss normalization and the layer-wise normalization baseline.

Masked loss normalization standardizes a batch of tokens with one scalar mean
and std estimated over signal elements only (pads excluded), then takes the
MSE between the standardized prediction and target. Statistics come from the
target batch so the map is a fixed affine transform per batch.

The layer-wise baseline instead normalizes every layer with statistics pooled
over a whole zoo, which only works when all zoo members share one layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .checkpoint_store import WeightCheckpoint
from .errors import DegenerateBatch, LayoutMismatch

EPS = 1e-8


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    count: int


def masked_stats(tokens, mask) -> NormStats:
    """Population mean/std over elements where ``mask == 1``."""
    t = np.asarray(tokens, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if t.shape != m.shape:
        raise ValueError(f"tokens {t.shape} and mask {m.shape} differ in shape")
    count = int(m.sum())
    if count == 0:
        raise DegenerateBatch("batch has no unmasked elements")
    vals = t[m]
    mean = vals.mean()
    std = np.sqrt(np.mean((vals - mean) ** 2))
    return NormStats(float(mean), float(std), count)


def normalize_tokens(tokens, mask, stats: NormStats, eps: float = EPS) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    out = (t - stats.mean) / max(stats.std, eps)
    return np.where(m, out, 0.0)


def mln_loss(pred, target, mask, eps: float = EPS) -> float:
    """Reference (float64 numpy) masked-normalized MSE."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ in shape")
    stats = masked_stats(target, mask)
    diff = normalize_tokens(pred, mask, stats, eps) - normalize_tokens(target, mask, stats, eps)
    return float((diff**2).sum() / stats.count)


# torch versions used inside training; same definitions as above


def masked_stats_torch(tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    m = mask.to(tokens.dtype)
    count = m.sum()
    if count.item() == 0:
        raise DegenerateBatch("batch has no unmasked elements")
    mean = (tokens * m).sum() / count
    var = (((tokens - mean) * m) ** 2).sum() / count
    return mean, var.sqrt(), count


def mln_loss_torch(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    target = target.detach()
    mean, std, count = masked_stats_torch(target, mask)
    scale = torch.clamp(std, min=eps)
    m = mask.to(pred.dtype)
    diff = ((pred - mean) / scale - (target - mean) / scale) * m
    return (diff**2).sum() / count


def masked_mse_torch(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Unnormalized MSE over signal elements (the no-normalization ablation)."""
    m = mask.to(pred.dtype)
    count = m.sum()
    if count.item() == 0:
        raise DegenerateBatch("batch has no unmasked elements")
    return (((pred - target.detach()) * m) ** 2).sum() / count


# --------------------------------------------------------------------------
# layer-wise baseline


@dataclass
class LayerStats:
    stats: dict[str, tuple[float, float]]
    layout_id: str | None = None

    def to_json(self) -> dict[str, list[float]]:
        return {name: [mu, sigma] for name, (mu, sigma) in self.stats.items()}

    @classmethod
    def from_json(cls, obj: dict[str, Sequence[float]]) -> "LayerStats":
        return cls({name: (float(v[0]), float(v[1])) for name, v in obj.items()})

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def lwln_fit(zoo: Sequence[WeightCheckpoint]) -> LayerStats:
    if not zoo:
        raise LayoutMismatch("cannot fit layer statistics on an empty zoo")
    layout_id = zoo[0].layout_id
    if any(c.layout_id != layout_id for c in zoo):
        raise LayoutMismatch("layer-wise normalization needs a single shared layout")
    stats = {}
    for i, name in enumerate(zoo[0].names()):
        vals = np.concatenate([c.layers[i].data for c in zoo]).astype(np.float64)
        if vals.size < 2:
            raise DegenerateBatch(f"layer {name!r} has fewer than 2 elements across the zoo")
        stats[name] = (float(vals.mean()), float(vals.std()))
    return LayerStats(stats, layout_id)


def lwln_apply(
    ckpt: WeightCheckpoint, stats: LayerStats, inverse: bool = False, eps: float = EPS
) -> WeightCheckpoint:
    if set(ckpt.names()) != set(stats.stats) or (
        stats.layout_id is not None and stats.layout_id != ckpt.layout_id
    ):
        raise LayoutMismatch("checkpoint layout does not match the layer statistics")
    out = {}
    for layer in ckpt.layers:
        mu, sigma = stats.stats[layer.name]
        scale = max(sigma, eps)
        x = layer.data.astype(np.float64)
        out[layer.name] = x * scale + mu if inverse else (x - mu) / scale
    return ckpt.replace_data(out)
