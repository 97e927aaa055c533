"""Checkpoint <-> token sequence conversion.

Two schemes cut every layer into fixed-length tokens of ``d_t`` values:

* sparse: the layer is viewed as ``[c_out, c_r]`` and every row is chunked on
  its own, so each row's last chunk may carry zero pads;
* dense: the whole flattened layer is chunked, so only the layer's last token
  may carry pads.

Tokens never straddle layer boundaries. Each token gets a position triple
``(n, l, k)``: global index, layer index, index within its layer.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint_store import Layer, WeightCheckpoint, default_non_trainable, layout_hash
from .errors import ConfigError, EmptyLayer, FormatError, IoError, LayoutMismatch

Layout = Sequence[tuple[str, Sequence[int]]]


class Scheme(str, Enum):
    SPARSE = "sparse"
    DENSE = "dense"


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: np.ndarray  # [n, d_t] float32
    mask: np.ndarray  # [n, d_t] uint8, 1 = signal
    positions: np.ndarray  # [n, 3] int64, columns (n, l, k)
    scheme: Scheme
    layout_id: str
    layout: tuple[tuple[str, tuple[int, ...]], ...] = ()

    @property
    def n(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def d_t(self) -> int:
        return int(self.tokens.shape[1])

    def __len__(self) -> int:
        return self.n


def _rows(shape: Sequence[int], scheme: Scheme) -> tuple[int, int]:
    """Rows and row length a layer is chunked over."""
    size = int(math.prod(shape))
    if scheme is Scheme.DENSE or len(shape) < 2:
        return 1, size
    return int(shape[0]), size // int(shape[0])


def layer_token_count(shape: Sequence[int], d_t: int, scheme: Scheme | str) -> int:
    rows, row_len = _rows(shape, Scheme(scheme))
    return rows * -(-row_len // d_t)


def token_count(layout: Layout, d_t: int, scheme: Scheme | str) -> int:
    return sum(layer_token_count(shape, d_t, scheme) for _, shape in layout)


def layout_positions(layout: Layout, d_t: int, scheme: Scheme | str) -> np.ndarray:
    counts = [layer_token_count(shape, d_t, scheme) for _, shape in layout]
    total = sum(counts)
    pos = np.empty((total, 3), dtype=np.int64)
    pos[:, 0] = np.arange(total)
    pos[:, 1] = np.repeat(np.arange(len(counts)), counts)
    pos[:, 2] = np.concatenate([np.arange(c) for c in counts]) if counts else []
    return pos


def _tokenize(ckpt: WeightCheckpoint, d_t: int, scheme: Scheme) -> TokenSequence:
    if not isinstance(d_t, (int, np.integer)) or d_t < 1:
        raise ConfigError(f"token size must be a positive integer, got {d_t!r}")
    tok_parts, mask_parts = [], []
    for layer in ckpt.layers:
        if layer.size == 0:
            raise EmptyLayer(f"layer {layer.name!r} has shape {list(layer.shape)}")
        rows, row_len = _rows(layer.shape, scheme)
        chunks = -(-row_len // d_t)
        width = chunks * d_t
        tok = np.zeros((rows, width), dtype=np.float32)
        msk = np.zeros((rows, width), dtype=np.uint8)
        tok[:, :row_len] = layer.data.reshape(rows, row_len)
        msk[:, :row_len] = 1
        tok_parts.append(tok.reshape(rows * chunks, d_t))
        mask_parts.append(msk.reshape(rows * chunks, d_t))
    if tok_parts:
        tokens = np.concatenate(tok_parts)
        mask = np.concatenate(mask_parts)
    else:
        tokens = np.zeros((0, d_t), dtype=np.float32)
        mask = np.zeros((0, d_t), dtype=np.uint8)
    layout = tuple((name, tuple(shape)) for name, shape in ckpt.layout)
    return TokenSequence(
        tokens=tokens,
        mask=mask,
        positions=layout_positions(layout, d_t, scheme),
        scheme=scheme,
        layout_id=ckpt.layout_id,
        layout=layout,
    )


def tokenize_sparse(ckpt: WeightCheckpoint, d_t: int) -> TokenSequence:
    """Chunk each outgoing-channel row; 1-D tensors count as a single row."""
    return _tokenize(ckpt, d_t, Scheme.SPARSE)


def tokenize_dense(ckpt: WeightCheckpoint, d_t: int) -> TokenSequence:
    """Chunk each fully flattened layer; only a layer's last token is padded."""
    return _tokenize(ckpt, d_t, Scheme.DENSE)


def tokenize(ckpt: WeightCheckpoint, d_t: int, scheme: Scheme | str) -> TokenSequence:
    return _tokenize(ckpt, d_t, Scheme(scheme))


def detokenize(
    seq: TokenSequence,
    layout: Layout,
    non_trainable: Iterable[str] | None = None,
) -> WeightCheckpoint:
    """Invert a tokenizer. Pad elements are dropped; values need not be zero."""
    layout = [(name, tuple(int(s) for s in shape)) for name, shape in layout]
    if layout_hash(layout) != seq.layout_id:
        raise LayoutMismatch("layout does not match the sequence's layout id")
    d_t = seq.d_t
    expected = token_count(layout, d_t, seq.scheme)
    if seq.n != expected:
        raise LayoutMismatch(f"sequence has {seq.n} tokens, layout needs {expected}")
    layers = []
    start = 0
    for name, shape in layout:
        rows, row_len = _rows(shape, seq.scheme)
        chunks = -(-row_len // d_t)
        block = np.asarray(seq.tokens[start : start + rows * chunks], dtype=np.float32)
        data = block.reshape(rows, chunks * d_t)[:, :row_len].reshape(-1).copy()
        layers.append(Layer(name, shape, data))
        start += rows * chunks
    names = [name for name, _ in layout]
    nt = default_non_trainable(names) if non_trainable is None else frozenset(non_trainable)
    return WeightCheckpoint(tuple(layers), nt)


def padding_fraction(seq: TokenSequence) -> float:
    if seq.n == 0:
        raise ConfigError("padding fraction of an empty sequence is undefined")
    return 1.0 - float(seq.mask.sum()) / (seq.n * seq.d_t)


# --------------------------------------------------------------------------
# token file: [u64 N][JSON header][float32 tokens][packed mask bits]


def save_tokens(seq: TokenSequence, path: str | os.PathLike, model_id: str | None = None) -> None:
    header = {
        "scheme": seq.scheme.value,
        "d_t": seq.d_t,
        "layout_id": seq.layout_id,
        "n": seq.n,
        "layout": [[name, list(shape)] for name, shape in seq.layout],
    }
    if model_id is not None:
        header["model_id"] = model_id
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    body = seq.tokens.astype("<f4").tobytes() + np.packbits(seq.mask.reshape(-1)).tobytes()
    try:
        Path(path).write_bytes(struct.pack("<Q", len(blob)) + blob + body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_tokens(path: str | os.PathLike) -> tuple[TokenSequence, dict]:
    """Read a token file; returns the sequence and its raw header."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError("token file too short")
    (hlen,) = struct.unpack("<Q", buf[:8])
    if hlen > len(buf) - 8:
        raise FormatError("token header length exceeds file size")
    try:
        header = json.loads(buf[8 : 8 + hlen])
        n, d_t = int(header["n"]), int(header["d_t"])
        scheme = Scheme(header["scheme"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed token header: {exc}") from exc
    body = buf[8 + hlen :]
    nbytes = 4 * n * d_t
    mask_bytes = -(-(n * d_t) // 8)
    if len(body) != nbytes + mask_bytes:
        raise FormatError("token file body has the wrong size")
    tokens = np.frombuffer(body[:nbytes], dtype="<f4").astype(np.float32).reshape(n, d_t)
    bits = np.unpackbits(np.frombuffer(body[nbytes:], dtype=np.uint8), count=n * d_t)
    layout = tuple((name, tuple(shape)) for name, shape in header.get("layout", []))
    positions = (
        layout_positions(layout, d_t, scheme)
        if layout
        else np.stack([np.arange(n), np.zeros(n, int), np.arange(n)], axis=1)
    )
    seq = TokenSequence(
        tokens=tokens,
        mask=bits.reshape(n, d_t).astype(np.uint8),
        positions=positions.astype(np.int64),
        scheme=scheme,
        layout_id=header["layout_id"],
        layout=layout,
    )
    return seq, header
