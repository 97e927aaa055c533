"""Desk-scale model zoo: architectures, synthetic datasets, training, probing.

Two architecture kinds give layout heterogeneity:

* ``mlp``: ``fc{i}`` linear layers (optionally each followed by ``bn{i}``)
  with ReLU, then a linear ``head``;
* ``convbn``: the input vector is treated as a one-channel 1-D signal;
  ``conv{i}`` (no bias) -> ``bn{i}`` -> ReLU blocks, global average pooling,
  linear ``head``.

Forward passes are functional over a name -> tensor map so any conforming
``WeightCheckpoint`` can be evaluated directly.
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint_store import WeightCheckpoint, save_checkpoint
from .errors import ConfigError, DegenerateTargets, EmptySchedule, LayoutMismatch

BN_EPS = 1e-5


# --------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: str
    kind: str = "mlp"  # "mlp" | "convbn"
    widths: tuple[int, ...] = (16,)
    input_dim: int = 8
    num_classes: int = 2
    has_bn: bool = False
    kernel_size: int = 3

    def __post_init__(self):
        if self.kind not in ("mlp", "convbn"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if not self.widths or min(self.widths) < 1 or self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError(f"bad architecture dimensions in {self.arch_id!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def uses_bn(self) -> bool:
        return self.kind == "convbn" or self.has_bn

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out: list[tuple[str, tuple[int, ...]]] = []
        prev = self.input_dim if self.kind == "mlp" else 1
        for i, w in enumerate(self.widths):
            if self.kind == "mlp":
                out += [(f"fc{i}.weight", (w, prev)), (f"fc{i}.bias", (w,))]
            else:
                out.append((f"conv{i}.weight", (w, prev, self.kernel_size)))
            if self.uses_bn:
                out += [
                    (f"bn{i}.weight", (w,)),
                    (f"bn{i}.bias", (w,)),
                    (f"bn{i}.running_mean", (w,)),
                    (f"bn{i}.running_var", (w,)),
                ]
            prev = w
        out += [("head.weight", (self.num_classes, prev)), ("head.bias", (self.num_classes,))]
        return out

    def check_layout(self, w: WeightCheckpoint) -> None:
        if [(n, tuple(s)) for n, s in w.layout] != self.layout():
            raise LayoutMismatch(f"checkpoint layout does not match architecture {self.arch_id!r}")

    def init_weights(self, seed: int) -> WeightCheckpoint:
        """Uniform fan-in initialization; BN affine at (1, 0), stats at (0, 1)."""
        rng = np.random.default_rng(seed)
        arrays = {}
        fan_in = {}
        for name, shape in self.layout():
            base, kind = name.rsplit(".", 1)
            if base.startswith("bn"):
                fill = 1.0 if kind in ("weight", "running_var") else 0.0
                arrays[name] = np.full(shape, fill, dtype=np.float32)
                continue
            if kind == "weight":
                fan_in[base] = int(math.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in[base])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return WeightCheckpoint.from_arrays(arrays)

    def forward(
        self,
        params: dict[str, torch.Tensor],
        x: torch.Tensor,
        train: bool = False,
        momentum: float = 0.1,
    ) -> torch.Tensor:
        """Logits for inputs ``x``; in train mode BN running stats in
        ``params`` are updated in place."""
        h = x if self.kind == "mlp" else x[:, None, :]
        for i in range(len(self.widths)):
            if self.kind == "mlp":
                h = F.linear(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
            else:
                h = F.conv1d(h, params[f"conv{i}.weight"], padding=self.kernel_size // 2)
            if self.uses_bn:
                h = F.batch_norm(
                    h,
                    params[f"bn{i}.running_mean"],
                    params[f"bn{i}.running_var"],
                    params[f"bn{i}.weight"],
                    params[f"bn{i}.bias"],
                    training=train,
                    momentum=momentum,
                    eps=BN_EPS,
                )
            h = F.relu(h)
        if self.kind == "convbn":
            h = h.mean(dim=-1)
        return F.linear(h, params["head.weight"], params["head.bias"])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureSpec":
        return cls(**{**obj, "widths": tuple(obj["widths"])})


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SyntheticDataset:
    dataset_id: str
    generator: str = "blobs"  # "blobs" | "rings"
    num_classes: int = 2
    dimension: int = 8
    seed: int = 0
    n_train: int = 512
    n_test: int = 256
    separation: float = 3.0
    noise: float = 1.0
    label_shift: int = 0

    def __post_init__(self):
        if self.generator not in ("blobs", "rings"):
            raise ConfigError(f"unknown dataset generator {self.generator!r}")
        if self.generator == "rings" and self.dimension < 2:
            raise ConfigError("ring datasets need dimension >= 2")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def arrays(self) -> "DatasetArrays":
        return _materialize(self)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticDataset":
        return cls(**obj)


@dataclass(frozen=True)
class DatasetArrays:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int


def _draw(ds: SyntheticDataset, rng: np.random.Generator, centers: np.ndarray | None, n: int):
    per = n // ds.num_classes
    y = np.repeat(np.arange(ds.num_classes), per)
    if ds.generator == "blobs":
        x = centers[y] + ds.noise * rng.normal(size=(y.size, ds.dimension))
    else:
        radius = 1.0 + ds.separation * y / max(ds.num_classes - 1, 1)
        angle = rng.uniform(0, 2 * np.pi, size=y.size)
        x = 0.15 * ds.noise * rng.normal(size=(y.size, ds.dimension))
        x[:, 0] += radius * np.cos(angle)
        x[:, 1] += radius * np.sin(angle)
    order = rng.permutation(y.size)
    y = (y + ds.label_shift) % ds.num_classes
    return x[order].astype(np.float32), y[order].astype(np.int64)


@functools.lru_cache(maxsize=64)
def _materialize(ds: SyntheticDataset) -> DatasetArrays:
    rng = np.random.default_rng(ds.seed)
    centers = None
    if ds.generator == "blobs":
        centers = rng.normal(size=(ds.num_classes, ds.dimension))
        centers *= ds.separation / np.linalg.norm(centers, axis=1, keepdims=True)
    x_tr, y_tr = _draw(ds, rng, centers, ds.n_train)
    x_te, y_te = _draw(ds, rng, centers, ds.n_test)
    for a in (x_tr, y_tr, x_te, y_te):
        a.setflags(write=False)
    return DatasetArrays(x_tr, y_tr, x_te, y_te, ds.num_classes)


def _as_arrays(data: SyntheticDataset | DatasetArrays) -> DatasetArrays:
    return data.arrays() if isinstance(data, SyntheticDataset) else data


# --------------------------------------------------------------------------
# evaluation and SGD training


def _params(w: WeightCheckpoint, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    out = {}
    for layer in w.layers:
        t = torch.tensor(layer.array(), dtype=torch.float32)
        if requires_grad and layer.name not in w.non_trainable_names:
            t.requires_grad_(True)
        out[layer.name] = t
    return out


def _to_checkpoint(params: dict[str, torch.Tensor], template: WeightCheckpoint) -> WeightCheckpoint:
    return template.replace_data({k: v.detach().numpy() for k, v in params.items()})


@torch.no_grad()
def _accuracy(arch: ArchitectureSpec, params, x: np.ndarray, y: np.ndarray) -> float:
    logits = arch.forward(params, torch.from_numpy(np.array(x)), train=False)
    pred = logits.argmax(dim=1).numpy()  # first maximum -> lowest class index on ties
    return float((pred == y).mean())


def evaluate_weights(
    w: WeightCheckpoint, arch: ArchitectureSpec, ds: SyntheticDataset | DatasetArrays, split: str = "test"
) -> float:
    """Accuracy of ``w`` on a dataset split without touching any parameter."""
    arch.check_layout(w)
    data = _as_arrays(ds)
    x, y = (data.x_test, data.y_test) if split == "test" else (data.x_train, data.y_train)
    return _accuracy(arch, _params(w), x, y)


def _sgd_epochs(
    w: WeightCheckpoint,
    arch: ArchitectureSpec,
    data: DatasetArrays,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    momentum: float = 0.9,
):
    """Yield ``(epoch, checkpoint, diverged)`` after each SGD epoch."""
    params = _params(w, requires_grad=True)
    trainable = [p for p in params.values() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    x_all = torch.from_numpy(np.array(data.x_train))
    y_all = torch.from_numpy(np.array(data.y_train))
    n = x_all.shape[0]
    for epoch in range(1, epochs + 1):
        order = torch.from_numpy(rng.permutation(n))
        diverged = False
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            if idx.numel() < 2 and arch.uses_bn:
                continue
            loss = F.cross_entropy(arch.forward(params, x_all[idx], train=True), y_all[idx])
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        yield epoch, _to_checkpoint(params, w), diverged
        if diverged:
            return


def finetune(
    w: WeightCheckpoint,
    arch: ArchitectureSpec,
    ds: SyntheticDataset | DatasetArrays,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    return_weights: bool = False,
):
    """SGD (momentum 0.9) from ``w``; test accuracy after every epoch."""
    if epochs < 1:
        raise ConfigError("finetuning needs at least one epoch")
    arch.check_layout(w)
    data = _as_arrays(ds)
    accs = []
    last = w
    for _, ckpt, diverged in _sgd_epochs(w, arch, data, epochs, lr, seed):
        last = ckpt
        accs.append(evaluate_weights(ckpt, arch, data) if not diverged else float("nan"))
    return (accs, last) if return_weights else accs


# --------------------------------------------------------------------------
# zoo generation


@dataclass
class ZooRecord:
    model_id: str
    path: str | None
    arch_id: str
    dataset_id: str
    epoch: int
    test_accuracy: float
    train_accuracy: float
    seed: int
    status: str = "ok"  # "ok" | "diverged"
    checkpoint: WeightCheckpoint | None = field(default=None, repr=False, compare=False)

    @property
    def ggap(self) -> float:
        return self.train_accuracy - self.test_accuracy

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "path": self.path,
            "arch_id": self.arch_id,
            "dataset_id": self.dataset_id,
            "epoch": self.epoch,
            "test_accuracy": self.test_accuracy,
            "train_accuracy": self.train_accuracy,
            "ggap": self.ggap,
            "seed": self.seed,
            "status": self.status,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ZooRecord":
        keys = ("model_id", "path", "arch_id", "dataset_id", "epoch",
                "test_accuracy", "train_accuracy", "seed", "status")
        return cls(**{k: obj[k] for k in keys if k in obj})


def generate_zoo(
    specs: Sequence[ArchitectureSpec],
    datasets: Sequence[SyntheticDataset],
    epochs: int,
    checkpoints_at: Sequence[int],
    seed: int = 0,
    members: int = 1,
    lr: float = 0.05,
    out_dir: str | os.PathLike | None = None,
) -> list[ZooRecord]:
    """Train every (spec, dataset, member) triple with SGD and keep the
    checkpoints at the requested epochs.

    Members differ in initialization and data order. With ``out_dir`` the
    checkpoints are written there and the records carry their paths.
    """
    if not specs or not datasets:
        raise ConfigError("need at least one architecture and one dataset")
    schedule = sorted({int(e) for e in checkpoints_at if 1 <= int(e) <= epochs})
    if epochs < 1 or not schedule:
        raise EmptySchedule("no checkpoint epochs to record")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    records = []
    run = 0
    for spec in specs:
        for ds in datasets:
            if ds.dimension != spec.input_dim or ds.num_classes != spec.num_classes:
                raise ConfigError(f"dataset {ds.dataset_id!r} does not fit architecture {spec.arch_id!r}")
            data = ds.arrays()
            for member in range(members):
                member_seed = int(np.random.SeedSequence([seed, run]).generate_state(1)[0])
                run += 1
                w0 = spec.init_weights(member_seed)
                for epoch, ckpt, diverged in _sgd_epochs(w0, spec, data, schedule[-1], lr, member_seed):
                    if epoch not in schedule and not diverged:
                        continue
                    model_id = f"{spec.arch_id}__{ds.dataset_id}__m{member}__e{epoch}"
                    if diverged:
                        records.append(ZooRecord(model_id, None, spec.arch_id, ds.dataset_id,
                                                 epoch, 0.0, 0.0, member_seed, "diverged"))
                        break
                    path = None
                    if out_dir is not None:
                        path = str(Path(out_dir) / f"{model_id}.safetensors")
                        save_checkpoint(ckpt, path)
                    records.append(
                        ZooRecord(
                            model_id=model_id,
                            path=path,
                            arch_id=spec.arch_id,
                            dataset_id=ds.dataset_id,
                            epoch=epoch,
                            test_accuracy=evaluate_weights(ckpt, spec, data),
                            train_accuracy=evaluate_weights(ckpt, spec, data, split="train"),
                            seed=member_seed,
                            checkpoint=ckpt,
                        )
                    )
    return records


def default_zoo_specs(input_dim: int = 8, num_classes: int = 2) -> list[ArchitectureSpec]:
    return [
        ArchitectureSpec("mlp-12", "mlp", (12,), input_dim, num_classes),
        ArchitectureSpec("mlp-20-10", "mlp", (20, 10), input_dim, num_classes),
        ArchitectureSpec("mlp-bn-16", "mlp", (16,), input_dim, num_classes, has_bn=True),
        ArchitectureSpec("mlp-24", "mlp", (24,), input_dim, num_classes),
        ArchitectureSpec("conv-4-6", "convbn", (4, 6), input_dim, num_classes),
    ]


def default_datasets(input_dim: int = 8, num_classes: int = 2) -> list[SyntheticDataset]:
    return [
        SyntheticDataset("blobs-a", "blobs", num_classes, input_dim, seed=11),
        SyntheticDataset("rings-a", "rings", num_classes, input_dim, seed=12, separation=1.5),
    ]


def write_zoo(
    records: Sequence[ZooRecord],
    specs: Sequence[ArchitectureSpec],
    datasets: Sequence[SyntheticDataset],
    out_dir: str | os.PathLike,
) -> None:
    """Write ``zoo.jsonl`` (usable records only) plus architecture and
    dataset definitions and a checkpoint manifest."""
    from .checkpoint_store import ManifestEntry, write_manifest

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in records if r.status == "ok"]
    with open(out_dir / "zoo.jsonl", "w", encoding="utf-8") as f:
        for r in ok:
            rec = r.to_json()
            if rec["path"] is not None:
                rec["path"] = os.path.relpath(rec["path"], out_dir)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    (out_dir / "architectures.json").write_text(json.dumps([s.to_json() for s in specs], indent=1))
    (out_dir / "datasets.json").write_text(json.dumps([d.to_json() for d in datasets], indent=1))
    entries = [
        ManifestEntry(os.path.relpath(r.path, out_dir), r.model_id, [r.arch_id])
        for r in ok
        if r.path is not None
    ]
    write_manifest(entries, out_dir / "manifest.json")


def read_zoo(zoo_dir: str | os.PathLike):
    """Return ``(records, {arch_id: spec}, {dataset_id: dataset})``."""
    zoo_dir = Path(zoo_dir)
    records = []
    for line in (zoo_dir / "zoo.jsonl").read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = ZooRecord.from_json(json.loads(line))
            if rec.path is not None and not os.path.isabs(rec.path):
                rec.path = str(zoo_dir / rec.path)
            records.append(rec)
    specs = [ArchitectureSpec.from_json(o) for o in json.loads((zoo_dir / "architectures.json").read_text())]
    dsets = [SyntheticDataset.from_json(o) for o in json.loads((zoo_dir / "datasets.json").read_text())]
    return records, {s.arch_id: s for s in specs}, {d.dataset_id: d for d in dsets}


# --------------------------------------------------------------------------
# discriminative probing


def mean_pool_embed(b, w: WeightCheckpoint) -> np.ndarray:
    """Average of all per-token latents of ``w``'s full token sequence."""
    from .backbone import encode_sequence
    from .tokenizer import tokenize

    seq = tokenize(w, b.cfg.d_t, b.cfg.scheme)
    return encode_sequence(b, seq).astype(np.float64).mean(axis=0)


def split_indices(m: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """70/15/15 train/validation/test index split."""
    order = np.random.default_rng(seed).permutation(m)
    n_train = int(round(0.7 * m))
    n_val = int(round(0.15 * m))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def linear_probe(embeddings, targets, split_seed: int = 0, ridge: float = 1e-6) -> float:
    """Test-split R² of a (barely) ridge-regularized linear fit."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigError("embeddings must be [m, dim] with one target per row")
    if x.shape[0] < 10:
        raise ConfigError("linear probe needs at least 10 samples")
    if np.ptp(y) == 0:
        raise DegenerateTargets("targets have zero variance")
    tr, _, te = split_indices(x.shape[0], split_seed)
    x_mu, y_mu = x[tr].mean(axis=0), y[tr].mean()
    xc = x[tr] - x_mu
    coef = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ (y[tr] - y_mu))
    pred = (x[te] - x_mu) @ coef + y_mu
    sst = ((y[te] - y[te].mean()) ** 2).sum()
    if sst == 0:
        raise DegenerateTargets("test targets have zero variance")
    return float(1.0 - ((y[te] - pred) ** 2).sum() / sst)


def probe_targets(records: Sequence[ZooRecord], target: str) -> np.ndarray:
    if target == "accuracy":
        return np.array([r.test_accuracy for r in records])
    if target == "ggap":
        return np.array([r.ggap for r in records])
    if target == "epoch":
        return np.array([float(r.epoch) for r in records])
    raise ConfigError(f"unknown probe target {target!r}")
