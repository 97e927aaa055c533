"""Generate new weights from a trained backbone.

Anchors are encoded to per-token latents. For every token slot a new latent
is drawn from a Gaussian KDE over the anchors' latents at that same slot, the
sampled sequence is decoded window by window (optionally with halo context),
detokenized to the anchors' layout, and non-trainable tensors are copied from
the first anchor. Batch-norm running statistics can then be re-estimated on
target data with ``bn_condition``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import Backbone, decode_sequence, encode_sequence
from .checkpoint_store import WeightCheckpoint
from .errors import ConfigError, LayoutMismatch
from .tokenizer import Scheme, TokenSequence, detokenize, tokenize
from .zoo import ArchitectureSpec, DatasetArrays, SyntheticDataset, _as_arrays, _params


@dataclass(frozen=True, eq=False)
class AnchorSet:
    latents: np.ndarray  # [n_anchors * n_tokens, latent_dim], anchor-major
    positions: np.ndarray  # [n_tokens, 3]
    mask: np.ndarray  # [n_tokens, d_t]
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    layout_id: str
    scheme: Scheme
    d_t: int
    num_anchors: int
    reference: WeightCheckpoint  # source of non-trainable tensors

    @property
    def tokens_per_model(self) -> int:
        return int(self.positions.shape[0])

    def by_slot(self) -> np.ndarray:
        """Latents as ``[n_anchors, n_tokens, latent_dim]``."""
        return self.latents.reshape(self.num_anchors, self.tokens_per_model, -1)


def embed_anchors(b: Backbone, anchors: Sequence[WeightCheckpoint], halo: int = 0) -> AnchorSet:
    if not anchors:
        raise ConfigError("need at least one anchor")
    layout_id = anchors[0].layout_id
    if any(a.layout_id != layout_id for a in anchors):
        raise LayoutMismatch("anchors must share one layout")
    seqs = [tokenize(a, b.cfg.d_t, b.cfg.scheme) for a in anchors]
    latents = np.concatenate([encode_sequence(b, s, halo) for s in seqs])
    return AnchorSet(
        latents=latents,
        positions=seqs[0].positions,
        mask=seqs[0].mask,
        layout=seqs[0].layout,
        layout_id=layout_id,
        scheme=seqs[0].scheme,
        d_t=b.cfg.d_t,
        num_anchors=len(anchors),
        reference=anchors[0],
    )


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Isotropic Gaussian KDE: one component ``N(point, h^2 I)`` per point."""

    points: np.ndarray
    bandwidth: float

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.dim == 1 and x.shape[0] == 1 and x.shape[1] != 1:
            x = x.T
        h = self.bandwidth
        sq = ((x[:, None, :] - self.points[None, :, :]) ** 2).sum(-1)
        norm = (2 * math.pi * h * h) ** (self.dim / 2)
        return np.exp(-0.5 * sq / (h * h)).mean(axis=1) / norm

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.points.shape[0], size=n)
        return self.points[idx] + self.bandwidth * rng.normal(size=(n, self.dim))


def fit_kde(points, bandwidth: float) -> KdeModel:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 1:
        raise ConfigError("KDE needs at least one point")
    if not bandwidth > 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    return KdeModel(pts, float(bandwidth))


def sample_latents(kde: KdeModel, n_tokens: int, rng: np.random.Generator) -> np.ndarray:
    if n_tokens < 1:
        raise ConfigError("n_tokens must be at least 1")
    return kde.sample(n_tokens, rng)


def sample_aligned(anchors: AnchorSet, bandwidth: float, rng: np.random.Generator) -> np.ndarray:
    """One latent per token slot, drawn from the KDE over that slot's anchor
    latents only."""
    if not bandwidth > 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    by_slot = anchors.by_slot().astype(np.float64)
    n_tokens, dim = by_slot.shape[1], by_slot.shape[2]
    pick = rng.integers(0, anchors.num_anchors, size=n_tokens)
    centers = by_slot[pick, np.arange(n_tokens)]
    return centers + bandwidth * rng.normal(size=(n_tokens, dim))


def default_bandwidth(anchors: AnchorSet) -> float:
    """Scott's rule on per-slot anchor latents; 0.05 for a single anchor."""
    if anchors.num_anchors < 2:
        return 0.05
    by_slot = anchors.by_slot().astype(np.float64)
    spread = float(by_slot.std(axis=0).mean())
    if spread == 0:
        return 0.05
    dim = by_slot.shape[2]
    return spread * anchors.num_anchors ** (-1.0 / (dim + 4))


def generate_weights(
    b: Backbone,
    anchors: AnchorSet,
    bandwidth: float | None,
    count: int,
    halo: int,
    rng: np.random.Generator,
) -> list[WeightCheckpoint]:
    if count < 1:
        raise ConfigError("count must be at least 1")
    if halo < 0 or halo >= b.cfg.window_size:
        raise ConfigError(f"halo must lie in [0, window_size), got {halo}")
    if bandwidth is None:
        bandwidth = default_bandwidth(anchors)
    nt = anchors.reference.non_trainable_names
    streams = rng.spawn(count)
    out = []
    for stream in streams:
        z = sample_aligned(anchors, bandwidth, stream).astype(np.float32)
        tokens = decode_sequence(b, z, anchors.positions, halo).astype(np.float32)
        seq = TokenSequence(
            tokens=tokens * anchors.mask,
            mask=anchors.mask,
            positions=anchors.positions,
            scheme=anchors.scheme,
            layout_id=anchors.layout_id,
            layout=anchors.layout,
        )
        ckpt = detokenize(seq, anchors.layout, nt)
        if nt:
            ckpt = ckpt.replace_data({name: anchors.reference[name] for name in nt})
        out.append(ckpt)
    return out


@torch.no_grad()
def bn_condition(
    w: WeightCheckpoint,
    arch: ArchitectureSpec,
    data: SyntheticDataset | DatasetArrays,
    passes: int = 5,
    momentum: float = 0.1,
    batch_size: int | None = None,
) -> WeightCheckpoint:
    """Re-estimate BN running statistics with ``passes`` train-mode forward
    passes; each pass is one EMA update. Trainable tensors are untouched.

    Batches cycle over the training split; by default a pass sees the whole
    split as one batch.
    """
    arch.check_layout(w)
    if passes < 1:
        raise ConfigError("passes must be at least 1")
    if not 0 < momentum <= 1:
        raise ConfigError("momentum must lie in (0, 1]")
    if not arch.uses_bn:
        return w
    arrays = _as_arrays(data)
    x = torch.from_numpy(np.array(arrays.x_train))
    bs = batch_size or x.shape[0]
    params = _params(w)
    starts = list(range(0, x.shape[0], bs))
    for p in range(passes):
        s = starts[p % len(starts)]
        arch.forward(params, x[s : s + bs], train=True, momentum=momentum)
    stats = {
        name: params[name].numpy()
        for name in w.names()
        if name.endswith(("running_mean", "running_var"))
    }
    return w.replace_data(stats)


def select_top(
    candidates: Sequence[WeightCheckpoint], scores: Sequence[float], keep: int
) -> list[tuple[int, WeightCheckpoint, float]]:
    """Best ``keep`` candidates by score, ties broken by original order."""
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [(i, candidates[i], scores[i]) for i in order[:keep]]


def reconstruct_checkpoint(b: Backbone, w: WeightCheckpoint, halo: int = 0) -> WeightCheckpoint:
    """``detokenize(decode(encode(tokenize(w))))`` with the backbone's settings."""
    seq = tokenize(w, b.cfg.d_t, b.cfg.scheme)
    latents = encode_sequence(b, seq, halo)
    tokens = decode_sequence(b, latents, seq.positions, halo).astype(np.float32)
    rec = TokenSequence(tokens * seq.mask, seq.mask, seq.positions, seq.scheme, seq.layout_id, seq.layout)
    return detokenize(rec, seq.layout, w.non_trainable_names)

