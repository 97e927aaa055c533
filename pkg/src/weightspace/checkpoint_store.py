"""Checkpoint files, manifests and ingestion sanity checks.

Checkpoints use the common length-prefixed tensor layout::

    [u64 little-endian N][N bytes of UTF-8 JSON header][raw tensor bytes]

Each header entry maps a tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the data section. Only ``F32`` tensors
are accepted. An optional ``__metadata__`` entry (string -> string) carries
the list of non-trainable tensor names.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyCollection,
    EmptyLayer,
    FormatError,
    InvariantViolation,
    IoError,
    UnsupportedDtype,
    WeightSpaceError,
)

NON_TRAINABLE_MARKERS = ("running_mean", "running_var", "num_batches")
_METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8


def layout_hash(layout: Sequence[tuple[str, Sequence[int]]]) -> str:
    payload = json.dumps([[name, [int(s) for s in shape]] for name, shape in layout])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def default_non_trainable(names: Iterable[str]) -> frozenset[str]:
    return frozenset(n for n in names if any(m in n for m in NON_TRAINABLE_MARKERS))


@dataclass(frozen=True, eq=False)
class Layer:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray  # flat float32, row-major

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


@dataclass(frozen=True, eq=False)
class WeightCheckpoint:
    """Ordered named float32 tensors of one network."""

    layers: tuple[Layer, ...]
    non_trainable_names: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise InvariantViolation("duplicate layer names")
        for layer in self.layers:
            if layer.data.ndim != 1 or layer.data.size != layer.size:
                raise InvariantViolation(
                    f"layer {layer.name!r}: shape {list(layer.shape)} does not match "
                    f"{layer.data.size} values"
                )
        extra = set(self.non_trainable_names) - set(names)
        if extra:
            raise InvariantViolation(f"non-trainable names not in checkpoint: {sorted(extra)}")

    @classmethod
    def from_arrays(
        cls,
        arrays: Iterable[tuple[str, np.ndarray]] | dict[str, np.ndarray],
        non_trainable: Iterable[str] | None = None,
    ) -> "WeightCheckpoint":
        """Build a checkpoint from ``(name, array)`` pairs, keeping their order.

        When ``non_trainable`` is None the batch-norm statistic names are
        detected by substring.
        """
        items = arrays.items() if isinstance(arrays, dict) else arrays
        layers = []
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float32)
            layers.append(Layer(name, tuple(int(s) for s in arr.shape), arr.reshape(-1).copy()))
        names = [layer.name for layer in layers]
        nt = default_non_trainable(names) if non_trainable is None else frozenset(non_trainable)
        return cls(tuple(layers), nt)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(layer.name, layer.shape) for layer in self.layers]

    @property
    def layout_id(self) -> str:
        return layout_hash(self.layout)

    @property
    def num_params(self) -> int:
        return sum(layer.size for layer in self.layers)

    def __getitem__(self, name: str) -> np.ndarray:
        for layer in self.layers:
            if layer.name == name:
                return layer.array()
        raise KeyError(name)

    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {layer.name: layer.array() for layer in self.layers}

    def replace_data(self, arrays: dict[str, np.ndarray]) -> "WeightCheckpoint":
        """Return a copy with some layers' values swapped, layout unchanged."""
        layers = []
        for layer in self.layers:
            if layer.name in arrays:
                data = np.asarray(arrays[layer.name], dtype=np.float32).reshape(-1).copy()
                layers.append(Layer(layer.name, layer.shape, data))
            else:
                layers.append(layer)
        return WeightCheckpoint(tuple(layers), self.non_trainable_names)

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([layer.data for layer in self.layers])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightCheckpoint):
            return NotImplemented
        if self.layout != other.layout or self.non_trainable_names != other.non_trainable_names:
            return False
        return all(a.data.tobytes() == b.data.tobytes() for a, b in zip(self.layers, other.layers))

    __hash__ = None  # type: ignore[assignment]


# --------------------------------------------------------------------------
# file format


def serialize_checkpoint(ckpt: WeightCheckpoint) -> bytes:
    header: dict[str, object] = {}
    if ckpt.non_trainable_names:
        header[_METADATA_KEY] = {"non_trainable": json.dumps(sorted(ckpt.non_trainable_names))}
    offset = 0
    chunks = []
    for layer in ckpt.layers:
        raw = layer.data.astype("<f4", copy=False).tobytes()
        header[layer.name] = {
            "dtype": "F32",
            "shape": list(layer.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        chunks.append(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % _HEADER_ALIGN)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(ckpt: WeightCheckpoint, path: str | os.PathLike) -> None:
    # re-validate in case the caller mutated arrays in place
    WeightCheckpoint(ckpt.layers, ckpt.non_trainable_names)
    data = serialize_checkpoint(ckpt)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"duplicate header key {key!r}")
        out[key] = value
    return out


def parse_checkpoint(buf: bytes, non_trainable: Iterable[str] | None = None) -> WeightCheckpoint:
    if len(buf) < 8:
        raise FormatError("file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise FormatError(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object")

    data = memoryview(buf)[8 + n :]
    metadata = header.pop(_METADATA_KEY, None)
    stored_nt = None
    if metadata is not None:
        if not isinstance(metadata, dict):
            raise FormatError("__metadata__ must be an object")
        if "non_trainable" in metadata:
            try:
                stored_nt = json.loads(metadata["non_trainable"])
            except (TypeError, json.JSONDecodeError) as exc:
                raise FormatError("bad non_trainable metadata") from exc

    spans = []
    arrays = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
            raise FormatError(f"tensor {name!r}: malformed entry")
        shape, offsets = entry["shape"], entry["data_offsets"]
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise FormatError(f"tensor {name!r}: bad shape {shape!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
        ):
            raise FormatError(f"tensor {name!r}: bad data_offsets {offsets!r}")
        begin, end = offsets
        if not 0 <= begin <= end <= len(data):
            raise FormatError(f"tensor {name!r}: offsets {offsets} out of bounds")
        if entry["dtype"] != "F32":
            raise UnsupportedDtype(f"tensor {name!r}: dtype {entry['dtype']!r}")
        if end - begin != 4 * math.prod(shape):
            raise FormatError(f"tensor {name!r}: byte span does not match shape")
        spans.append((begin, end, name))
        arr = np.frombuffer(data[begin:end], dtype="<f4").astype(np.float32)
        arrays.append((name, arr.reshape(shape)))

    spans.sort()
    for (_, prev_end, prev), (begin, _, cur) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError(f"tensors {prev!r} and {cur!r} overlap")

    nt = non_trainable if non_trainable is not None else stored_nt
    try:
        return WeightCheckpoint.from_arrays(arrays, nt)
    except InvariantViolation as exc:
        raise FormatError(str(exc)) from exc


def load_checkpoint(
    path: str | os.PathLike, non_trainable: Iterable[str] | None = None
) -> WeightCheckpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_checkpoint(buf, non_trainable)


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    model_id: str
    tags: list[str] = field(default_factory=list)
    non_trainable: list[str] | None = None

    def to_json(self) -> dict:
        out = {"path": self.path, "model_id": self.model_id, "tags": list(self.tags)}
        out["non_trainable"] = list(self.non_trainable or [])
        return out


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a JSON-array manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        items = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise FormatError("manifest must be a JSON array")
    entries = []
    for item in items:
        if not isinstance(item, dict) or "path" not in item:
            raise FormatError(f"bad manifest entry {item!r}")
        p = Path(item["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append(
            ManifestEntry(
                path=str(p),
                model_id=str(item.get("model_id", p.stem)),
                tags=list(item.get("tags", [])),
                non_trainable=item.get("non_trainable") or None,
            )
        )
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([e.to_json() for e in entries], indent=1), encoding="utf-8")


def scan_directory(directory: str | os.PathLike) -> list[ManifestEntry]:
    """Manifest for a directory: ``manifest.json`` if present, else every
    ``*.safetensors`` / ``*.st`` file in sorted order."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if manifest.exists():
        return read_manifest(manifest)
    files = sorted(
        p for p in directory.iterdir() if p.suffix in (".safetensors", ".st") and p.is_file()
    )
    return [ManifestEntry(path=str(p), model_id=p.stem) for p in files]


# --------------------------------------------------------------------------
# ingestion


@dataclass
class IngestReport:
    model_id: str
    loadable: bool
    tokenizable: bool
    reject_reason: str | None = None
    token_count_dense: int = 0
    token_count_sparse: int = 0
    num_params: int = 0
    layout_id: str | None = None

    @property
    def accepted(self) -> bool:
        return self.loadable and self.tokenizable

    def to_json(self) -> dict:
        return dict(self.__dict__)


def sanity_check(
    path: str | os.PathLike,
    d_t: int,
    model_id: str | None = None,
    non_trainable: Iterable[str] | None = None,
) -> IngestReport:
    """Load and tokenize one untrusted file, recording why it fails if it does.

    Never raises for file content problems.
    """
    from .tokenizer import tokenize_dense, tokenize_sparse

    model_id = model_id if model_id is not None else Path(path).stem
    try:
        ckpt = load_checkpoint(path, non_trainable)
    except UnsupportedDtype:
        return IngestReport(model_id, False, False, "dtype")
    except IoError:
        return IngestReport(model_id, False, False, "io")
    except (FormatError, WeightSpaceError, ValueError, OverflowError, MemoryError):
        return IngestReport(model_id, False, False, "format")

    try:
        dense = tokenize_dense(ckpt, d_t)
        sparse = tokenize_sparse(ckpt, d_t)
    except EmptyLayer:
        return IngestReport(model_id, True, False, "empty layer", layout_id=ckpt.layout_id)
    except (WeightSpaceError, ValueError, MemoryError):
        return IngestReport(model_id, True, False, "tokenize", layout_id=ckpt.layout_id)
    return IngestReport(
        model_id,
        True,
        True,
        None,
        token_count_dense=dense.n,
        token_count_sparse=sparse.n,
        num_params=ckpt.num_params,
        layout_id=ckpt.layout_id,
    )


@dataclass
class CollectionStats:
    num_models: int
    num_tokens_dense: int
    num_tokens_sparse: int
    padding_fraction_dense: float
    padding_fraction_sparse: float
    group_counts: dict[str, int]
    num_params: int = 0
    num_rejected: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def collection_stats(
    manifest: Sequence[str | os.PathLike | ManifestEntry],
    d_t: int,
    reports: list[IngestReport] | None = None,
) -> CollectionStats:
    """Aggregate ingestion over a manifest, counting accepted models only.

    Groups use an entry's first tag when available, otherwise its layout id.
    If ``reports`` is given, per-model reports are appended to it.
    """
    if not manifest:
        raise EmptyCollection("manifest is empty")
    groups: Counter[str] = Counter()
    n_models = n_dense = n_sparse = n_params = rejected = 0
    for item in manifest:
        if isinstance(item, ManifestEntry):
            rep = sanity_check(item.path, d_t, item.model_id, item.non_trainable)
            tag = item.tags[0] if item.tags else None
        else:
            rep = sanity_check(item, d_t)
            tag = None
        if reports is not None:
            reports.append(rep)
        if not rep.accepted:
            rejected += 1
            continue
        n_models += 1
        n_dense += rep.token_count_dense
        n_sparse += rep.token_count_sparse
        n_params += rep.num_params
        groups[tag or rep.layout_id] += 1
    if n_models == 0:
        raise EmptyCollection("every model in the manifest was rejected")
    return CollectionStats(
        num_models=n_models,
        num_tokens_dense=n_dense,
        num_tokens_sparse=n_sparse,
        padding_fraction_dense=1.0 - n_params / (n_dense * d_t),
        padding_fraction_sparse=1.0 - n_params / (n_sparse * d_t),
        group_counts=dict(sorted(groups.items())),
        num_params=n_params,
        num_rejected=rejected,
    )
