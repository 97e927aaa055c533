"""Transformer autoencoder over weight-token windows.

The encoder maps tokens ``[n, d_t]`` to per-token latents ``[n, latent_dim]``;
the decoder maps latents back to tokens. Both sides are stacks of pre-norm
self-attention blocks and receive the sinusoidal position encoding of the
tokens' ``(n, l, k)`` triples after their input projection.

Training draws one window per model per step, builds two masked/noised views,
and minimizes the masked-normalized reconstruction error of both views plus a
weighted NT-Xent term on the mean-pooled window latents.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint_store import WeightCheckpoint, load_checkpoint, save_checkpoint
from .errors import (
    BatchTooSmall,
    ConfigError,
    DegenerateData,
    DivergenceError,
    EmptySequence,
    ShapeError,
)
from .normalizer import masked_mse_torch, mln_loss_torch
from .posenc import PositionEncodingConfig, encode_batch
from .tokenizer import TokenSequence


@dataclass
class BackboneConfig:
    d_t: int = 32
    model_dim: int = 96
    latent_dim: int = 16
    num_layers: int = 2
    num_heads: int = 2
    window_size: int = 64
    subsample_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    temperature: float = 0.1
    aug_mask_prob: float = 0.1
    aug_noise_sigma: float = 0.01
    seed: int = 0
    contrastive_weight: float = 0.1
    scheme: str = "dense"
    loss_norm: str = "mln"  # "mln" or "none"
    mlp_ratio: int = 2
    pe_base: float = 10000.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_t", "model_dim", "latent_dim", "num_layers", "num_heads",
                     "window_size", "subsample_size", "batch_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.subsample_size > self.window_size:
            raise ConfigError("subsample_size must not exceed window_size")
        if self.latent_dim > self.model_dim:
            raise ConfigError("latent_dim must not exceed model_dim")
        if self.model_dim % 6:
            raise ConfigError("model_dim must be divisible by 6")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if not 0 <= self.aug_mask_prob < 1:
            raise ConfigError("aug_mask_prob must lie in [0, 1)")
        if self.aug_noise_sigma < 0:
            raise ConfigError("aug_noise_sigma must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.scheme not in ("dense", "sparse"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.loss_norm not in ("mln", "none"):
            raise ConfigError(f"unknown loss_norm {self.loss_norm!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**obj)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        b, m, d = x.shape
        q, k, v = self.qkv(x).reshape(b, m, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, m, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, key_valid=None):
        x = x + self.attn(self.norm1(x), key_valid)
        return x + self.mlp(self.norm2(x))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.pe_cfg = PositionEncodingConfig(cfg.model_dim, cfg.pe_base)
        d = cfg.model_dim
        self.in_proj = nn.Linear(cfg.d_t, d)
        self.encoder = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.to_latent = nn.Linear(d, cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, d)
        self.decoder = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.d_t)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def position_encoding(self, positions: torch.Tensor) -> torch.Tensor:
        pos = positions.detach().cpu().numpy().reshape(-1, 3)
        pe = torch.from_numpy(encode_batch(pos, self.pe_cfg)).to(self.dtype)
        return pe.reshape(*positions.shape[:-1], self.cfg.model_dim)

    def encode_batch(self, tokens, mask, positions, slot_valid=None) -> torch.Tensor:
        """Batched encoder: ``[B, m, d_t]`` -> ``[B, m, latent_dim]``.

        ``slot_valid`` marks real token slots when windows of different
        lengths share a batch; invalid slots are excluded as attention keys.
        """
        x = self.in_proj(tokens * mask.to(tokens.dtype)) + self.position_encoding(positions)
        for block in self.encoder:
            x = block(x, slot_valid)
        return self.to_latent(self.enc_norm(x))

    def decode_batch(self, latents, positions, slot_valid=None) -> torch.Tensor:
        x = self.from_latent(latents) + self.position_encoding(positions)
        for block in self.decoder:
            x = block(x, slot_valid)
        return self.out_proj(self.dec_norm(x))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_backbone(cfg: BackboneConfig) -> Backbone:
    """Seeded construction; identical configs give identical parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return Backbone(cfg)


# --------------------------------------------------------------------------
# single-context encode/decode (numpy in, numpy out)


def _check_tokens(b: Backbone, tokens, mask, positions):
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    positions = np.asarray(positions)
    if tokens.ndim != 2 or tokens.shape[1] != b.cfg.d_t:
        raise ShapeError(f"tokens must be [n, {b.cfg.d_t}], got {tokens.shape}")
    if mask.shape != tokens.shape:
        raise ShapeError("mask shape differs from tokens")
    if positions.shape != (tokens.shape[0], 3):
        raise ShapeError(f"positions must be [{tokens.shape[0]}, 3], got {positions.shape}")
    if tokens.shape[0] < 1:
        raise ShapeError("need at least one token")
    return tokens, mask, positions


def _t(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def encode(b: Backbone, tokens, mask, positions) -> np.ndarray:
    """Encode ``n`` tokens as one attention context; returns ``[n, latent_dim]``."""
    tokens, mask, positions = _check_tokens(b, tokens, mask, positions)
    z = b.encode_batch(
        _t(tokens, b.dtype)[None], _t(mask, b.dtype)[None], torch.as_tensor(positions)[None]
    )
    return z[0].numpy()


@torch.no_grad()
def decode(b: Backbone, latents, positions) -> np.ndarray:
    latents = np.asarray(latents)
    positions = np.asarray(positions)
    if latents.ndim != 2 or latents.shape[1] != b.cfg.latent_dim:
        raise ShapeError(f"latents must be [n, {b.cfg.latent_dim}], got {latents.shape}")
    if positions.shape != (latents.shape[0], 3):
        raise ShapeError("positions do not match latents")
    out = b.decode_batch(_t(latents, b.dtype)[None], torch.as_tensor(positions)[None])
    return out[0].numpy()


# --------------------------------------------------------------------------
# windowed processing of full sequences, with optional halo context


def halo_rows(start: int, stop: int, halo: int, n: int) -> np.ndarray:
    """Source row indices fed to the network for window ``[start, stop)``.

    ``halo`` context rows are added on each side; rows falling outside
    ``[0, n)`` are returned as -1 (zero-filled and excluded from attention).
    """
    rows = np.arange(start - halo, stop + halo)
    rows[(rows < 0) | (rows >= n)] = -1
    return rows


def _windows(n: int, ws: int) -> list[tuple[int, int]]:
    return [(s, min(s + ws, n)) for s in range(0, n, ws)]


def _gather(rows_list, arrays, n_cols_list):
    """Stack row-gathers of several arrays, zero-filling -1 rows."""
    out = []
    for arr, cols in zip(arrays, n_cols_list):
        stacked = np.zeros((len(rows_list), len(rows_list[0]), cols), dtype=arr.dtype)
        for i, rows in enumerate(rows_list):
            ok = rows >= 0
            stacked[i, ok] = arr[rows[ok]]
        out.append(stacked)
    return out


def _pad_rows(rows_list):
    width = max(len(r) for r in rows_list)
    return [np.concatenate([r, -np.ones(width - len(r), dtype=r.dtype)]) for r in rows_list]


@torch.no_grad()
def encode_sequence(b: Backbone, seq: TokenSequence, halo: int = 0) -> np.ndarray:
    """Per-token latents of a full sequence, processed window by window."""
    if seq.n == 0:
        raise EmptySequence("cannot encode an empty sequence")
    ws = b.cfg.window_size
    spans = _windows(seq.n, ws)
    rows_list = _pad_rows([halo_rows(s, e, halo, seq.n) for s, e in spans])
    tok, msk, pos = _gather(rows_list, [seq.tokens, seq.mask, seq.positions], [seq.d_t, seq.d_t, 3])
    valid = torch.as_tensor(np.stack(rows_list) >= 0)
    z = b.encode_batch(_t(tok, b.dtype), _t(msk, b.dtype), torch.as_tensor(pos), valid).numpy()
    out = np.empty((seq.n, b.cfg.latent_dim), dtype=z.dtype)
    for i, (s, e) in enumerate(spans):
        out[s:e] = z[i, halo : halo + (e - s)]
    return out


@torch.no_grad()
def decode_sequence(b: Backbone, latents: np.ndarray, positions: np.ndarray, halo: int = 0) -> np.ndarray:
    n = latents.shape[0]
    if n == 0:
        raise EmptySequence("cannot decode an empty sequence")
    spans = _windows(n, b.cfg.window_size)
    rows_list = _pad_rows([halo_rows(s, e, halo, n) for s, e in spans])
    lat, pos = _gather(rows_list, [np.asarray(latents), np.asarray(positions)], [latents.shape[1], 3])
    valid = torch.as_tensor(np.stack(rows_list) >= 0)
    t = b.decode_batch(_t(lat, b.dtype), torch.as_tensor(pos), valid).numpy()
    out = np.empty((n, b.cfg.d_t), dtype=t.dtype)
    for i, (s, e) in enumerate(spans):
        out[s:e] = t[i, halo : halo + (e - s)]
    return out


def reconstruct(b: Backbone, seq: TokenSequence, halo: int = 0) -> np.ndarray:
    return decode_sequence(b, encode_sequence(b, seq, halo), seq.positions, halo)


def reconstruction_r2(b: Backbone, data: Sequence[TokenSequence]) -> float:
    """Explained variance of reconstructed tokens over signal elements."""
    if not data:
        raise DegenerateData("no sequences given")
    targets, preds = [], []
    for seq in data:
        m = seq.mask.astype(bool)
        targets.append(seq.tokens[m].astype(np.float64))
        preds.append(reconstruct(b, seq)[m].astype(np.float64))
    return r2_score(np.concatenate(targets), np.concatenate(preds))


def r2_score(target: np.ndarray, pred: np.ndarray) -> float:
    sst = float(((target - target.mean()) ** 2).sum())
    if sst == 0:
        raise DegenerateData("targets have zero variance")
    return 1.0 - float(((target - pred) ** 2).sum()) / sst


# --------------------------------------------------------------------------
# windows and augmentation


@dataclass
class Window:
    tokens: np.ndarray
    mask: np.ndarray
    positions: np.ndarray
    source_model_id: str = ""
    start_index: int = 0

    @property
    def m(self) -> int:
        return int(self.tokens.shape[0])


def sample_window(
    seq: TokenSequence,
    ws: int,
    subsample_size: int,
    rng: np.random.Generator,
    model_id: str = "",
) -> Window:
    """Random contiguous span of ``min(ws, n)`` tokens, optionally subsampled
    to ``subsample_size`` sorted token indices."""
    if seq.n == 0:
        raise EmptySequence("cannot sample a window from an empty sequence")
    if ws < 1:
        raise ConfigError("window size must be positive")
    length = min(ws, seq.n)
    start = int(rng.integers(0, seq.n - length + 1))
    idx = np.arange(start, start + length)
    if subsample_size < length:
        idx = start + np.sort(rng.choice(length, size=subsample_size, replace=False))
    return Window(
        tokens=seq.tokens[idx],
        mask=seq.mask[idx],
        positions=seq.positions[idx],
        source_model_id=model_id,
        start_index=start,
    )


def _augment_view(w: Window, mask_prob: float, sigma: float, rng: np.random.Generator) -> Window:
    signal = w.mask.astype(bool)
    noise = rng.normal(0.0, 1.0, size=w.tokens.shape) * sigma
    keep = rng.random(w.tokens.shape) >= mask_prob
    noisy = ((w.tokens + noise) * keep).astype(w.tokens.dtype)
    return dataclasses.replace(w, tokens=np.where(signal, noisy, w.tokens))


def augment(w: Window, cfg: BackboneConfig, rng: np.random.Generator) -> tuple[Window, Window]:
    """Two independently noised and zero-masked views of a window.

    Noise is added first, then signal elements are zeroed with probability
    ``aug_mask_prob``; pad elements and positions are left untouched.
    """
    if not 0 <= cfg.aug_mask_prob < 1:
        raise ConfigError("aug_mask_prob must lie in [0, 1)")
    return (
        _augment_view(w, cfg.aug_mask_prob, cfg.aug_noise_sigma, rng),
        _augment_view(w, cfg.aug_mask_prob, cfg.aug_noise_sigma, rng),
    )


# --------------------------------------------------------------------------
# losses


def contrastive_loss(z_a, z_b, temperature: float):
    """NT-Xent over ``2B`` embeddings.

    Returns a tensor when given tensors (differentiable), a float otherwise.
    """
    as_float = not isinstance(z_a, torch.Tensor)
    if as_float:
        z_a = torch.as_tensor(np.asarray(z_a), dtype=torch.float64)
        z_b = torch.as_tensor(np.asarray(z_b), dtype=torch.float64)
    batch = z_a.shape[0]
    if batch < 2:
        raise BatchTooSmall(f"contrastive loss needs at least 2 pairs, got {batch}")
    if z_b.shape != z_a.shape:
        raise ShapeError("view embeddings differ in shape")
    z = F.normalize(torch.cat([z_a, z_b]), dim=1)
    sim = (z @ z.T) / temperature
    sim = sim.masked_fill(torch.eye(2 * batch, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(batch, 2 * batch), torch.arange(batch)])
    loss = F.cross_entropy(sim, targets)
    return float(loss) if as_float else loss


def _collate(windows: Sequence[Window], dtype):
    width = max(w.m for w in windows)
    b = len(windows)
    d_t = windows[0].tokens.shape[1]
    tok = np.zeros((b, width, d_t), dtype=np.float64)
    msk = np.zeros((b, width, d_t), dtype=np.float64)
    pos = np.zeros((b, width, 3), dtype=np.int64)
    valid = np.zeros((b, width), dtype=bool)
    for i, w in enumerate(windows):
        tok[i, : w.m] = w.tokens
        msk[i, : w.m] = w.mask
        pos[i, : w.m] = w.positions
        valid[i, : w.m] = True
    return (
        torch.as_tensor(tok, dtype=dtype),
        torch.as_tensor(msk, dtype=dtype),
        torch.as_tensor(pos),
        torch.as_tensor(valid),
    )


def _pool(z: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    v = valid.to(z.dtype)[..., None]
    return (z * v).sum(1) / v.sum(1)


def batch_losses(
    b: Backbone,
    targets: Sequence[Window],
    views_a: Sequence[Window],
    views_b: Sequence[Window],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction, contrastive) for one batch of windows."""
    cfg = b.cfg
    tok, msk, pos, valid = _collate(targets, b.dtype)
    tok_a = _collate(views_a, b.dtype)[0]
    tok_b = _collate(views_b, b.dtype)[0]
    # views share masks/positions with their targets
    z_a = b.encode_batch(tok_a, msk, pos, valid)
    z_b = b.encode_batch(tok_b, msk, pos, valid)
    rec_a = b.decode_batch(z_a, pos, valid)
    rec_b = b.decode_batch(z_b, pos, valid)
    loss_mask = msk * valid.to(msk.dtype)[..., None]
    rec_fn = mln_loss_torch if cfg.loss_norm == "mln" else masked_mse_torch
    rec = 0.5 * (rec_fn(rec_a, tok, loss_mask) + rec_fn(rec_b, tok, loss_mask))
    if len(targets) >= 2 and cfg.contrastive_weight > 0:
        con = contrastive_loss(_pool(z_a, valid), _pool(z_b, valid), cfg.temperature)
    else:
        con = torch.zeros((), dtype=rec.dtype)
    return rec + cfg.contrastive_weight * con, rec, con


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"] if self.epochs else float("nan")

    def to_json(self) -> dict:
        return {"epochs": self.epochs}


def _one_cycle(optimizer, max_lr: float, total_steps: int):
    if total_steps >= 2:
        return torch.optim.lr_scheduler.OneCycleLR(optimizer, max_lr=max_lr, total_steps=total_steps)
    return None


def train(
    data: Sequence[TokenSequence],
    cfg: BackboneConfig,
    model_ids: Sequence[str] | None = None,
    init: Backbone | None = None,
) -> tuple[Backbone, TrainingLog]:
    """Train a backbone; fully determined by ``cfg`` in single-threaded mode."""
    if not data:
        raise EmptySequence("no training sequences")
    cfg.validate()
    for seq in data:
        if seq.d_t != cfg.d_t:
            raise ConfigError(f"sequence token size {seq.d_t} != config d_t {cfg.d_t}")
        if seq.n == 0:
            raise EmptySequence("training data contains an empty sequence")
    ids = list(model_ids) if model_ids is not None else [str(i) for i in range(len(data))]
    model = init if init is not None else build_backbone(cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = -(-len(data) // cfg.batch_size)
    scheduler = _one_cycle(optimizer, cfg.learning_rate, cfg.epochs * steps_per_epoch)
    log = TrainingLog()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            windows = [
                sample_window(data[i], cfg.window_size, cfg.subsample_size, rng, ids[i]) for i in idx
            ]
            views = [augment(w, cfg, rng) for w in windows]
            total, rec, con = batch_losses(
                model, windows, [v[0] for v in views], [v[1] for v in views]
            )
            if not torch.isfinite(total):
                raise DivergenceError(step)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            sums += [total.item(), rec.item(), con.item()]
            step += 1
        sums /= steps_per_epoch
        log.epochs.append(
            {
                "epoch": epoch + 1,
                "loss": float(sums[0]),
                "reconstruction": float(sums[1]),
                "contrastive": float(sums[2]),
                "lr": float(optimizer.param_groups[0]["lr"]),
            }
        )
    model.eval()
    return model, log


# --------------------------------------------------------------------------
# gradient check


def gradient_check(
    b: Backbone,
    windows: Sequence[Window],
    epsilon: float = 1e-4,
    loss: str = "combined",
    views: tuple[Sequence[Window], Sequence[Window]] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``b``. Views default to the windows themselves
    so the loss is a deterministic function of the parameters. Relative error
    per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    model = copy.deepcopy(b).double()
    model.cfg = dataclasses.replace(b.cfg)
    if loss == "mse":
        model.cfg.contrastive_weight = 0.0
    elif loss == "contrastive":
        if len(windows) < 2:
            raise BatchTooSmall("contrastive gradient check needs at least 2 windows")
    elif loss != "combined":
        raise ConfigError(f"unknown loss {loss!r}")
    views_a, views_b = views if views is not None else (windows, windows)

    def objective() -> torch.Tensor:
        total, rec, con = batch_losses(model, windows, views_a, views_b)
        return con if loss == "contrastive" else total

    params = [p for p in model.parameters()]
    model.zero_grad()
    objective().backward()
    analytic = [
        torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.detach().clone().reshape(-1)
        for p in params
    ]

    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = objective().item()
                flat[i] = orig - epsilon
                down = objective().item()
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                a = grad[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# persistence: tensor file + JSON config sidecar


def save_backbone(b: Backbone, path: str | os.PathLike) -> None:
    state = {k: v.detach().float().numpy() for k, v in b.state_dict().items()}
    save_checkpoint(WeightCheckpoint.from_arrays(state, non_trainable=()), path)
    Path(str(path) + ".json").write_text(json.dumps(b.cfg.to_json(), indent=1, sort_keys=True))


def load_backbone(path: str | os.PathLike) -> Backbone:
    cfg = BackboneConfig.from_json(json.loads(Path(str(path) + ".json").read_text()))
    model = Backbone(cfg)
    ckpt = load_checkpoint(path, non_trainable=())
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.to_dict().items()})
    model.eval()
    return model
