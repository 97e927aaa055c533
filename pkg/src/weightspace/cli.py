"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Machine-readable results go to JSON files; a short human summary goes to
stdout and diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .backbone import (
    BackboneConfig,
    build_backbone,
    load_backbone,
    reconstruction_r2,
    save_backbone,
    train,
)
from .checkpoint_store import collection_stats, load_checkpoint, save_checkpoint, scan_directory
from .errors import ConfigError, PartialReport, ValidationError, WeightSpaceError
from .report import pipeline_report
from .sampler import bn_condition, embed_anchors, generate_weights, select_top
from .tokenizer import load_tokens, padding_fraction, save_tokens, tokenize
from .zoo import (
    ArchitectureSpec,
    SyntheticDataset,
    default_datasets,
    default_zoo_specs,
    evaluate_weights,
    finetune,
    generate_zoo,
    linear_probe,
    mean_pool_embed,
    probe_targets,
    read_zoo,
    write_zoo,
)

log = logging.getLogger("weightspace")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(args: argparse.Namespace, out: Path, extra: dict | None = None) -> None:
    """Resolved-config snapshot beside an output file or inside an output dir."""
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra or {})
    target = out / "run.json" if out.suffix == "" else out.with_name(out.name + ".run.json")
    _write_json(target, cfg)


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _rel(path: str | os.PathLike, base: Path) -> str:
    return os.path.relpath(path, base)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> dict:
    out = Path(args.out)
    entries = scan_directory(args.dir)
    reports: list = []
    stats = collection_stats(entries, args.token_size, reports)
    result = {
        "token_size": args.token_size,
        "stats": stats.to_json(),
        "models": [r.to_json() for r in reports],
    }
    _write_json(out, result)
    _snapshot(args, out)
    print(
        f"ingested {stats.num_models} models ({stats.num_rejected} rejected); "
        f"padding dense {stats.padding_fraction_dense:.4f}, sparse {stats.padding_fraction_sparse:.4f}"
    )
    return result


def cmd_tokenize(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = []
    total_signal = total_slots = 0
    for entry in scan_directory(args.dir):
        ckpt = load_checkpoint(entry.path, entry.non_trainable)
        seq = tokenize(ckpt, args.token_size, args.scheme)
        fname = f"{entry.model_id}.tok"
        save_tokens(seq, out / fname, entry.model_id)
        total_signal += int(seq.mask.sum())
        total_slots += seq.n * seq.d_t
        models.append(
            {"model_id": entry.model_id, "file": fname, "n": seq.n,
             "padding_fraction": padding_fraction(seq), "layout_id": seq.layout_id}
        )
    if not models:
        raise ConfigError(f"no checkpoints found in {args.dir}")
    index = {
        "scheme": args.scheme,
        "d_t": args.token_size,
        "models": models,
        "padding_fraction": 1.0 - total_signal / total_slots,
    }
    _write_json(out / "index.json", index)
    _snapshot(args, out)
    print(f"tokenized {len(models)} models into {out} ({args.scheme}, d_t={args.token_size})")
    return index


def _read_token_dir(data_dir: str | os.PathLike):
    data_dir = Path(data_dir)
    index_path = data_dir / "index.json"
    if not index_path.exists():
        raise ConfigError(f"{data_dir} has no index.json; run `tokenize` first")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    seqs, ids = [], []
    for m in index["models"]:
        seq, _ = load_tokens(data_dir / m["file"])
        seqs.append(seq)
        ids.append(m["model_id"])
    return index, seqs, ids


def cmd_train(args) -> dict:
    out = Path(args.out)
    index, seqs, ids = _read_token_dir(args.data)
    raw = _load_json_config(args.config)
    raw.setdefault("d_t", index["d_t"])
    raw.setdefault("scheme", index["scheme"])
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    cfg = BackboneConfig.from_json(raw)
    if cfg.d_t != index["d_t"] or cfg.scheme != index["scheme"]:
        raise ConfigError("backbone d_t/scheme must match the tokenized data")
    model, train_log = train(seqs, cfg, ids)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(model, out)
    result = {
        "config": cfg.to_json(),
        "log": train_log.to_json(),
        "final_loss": train_log.final_loss,
        "reconstruction_r2": reconstruction_r2(model, seqs),
        "num_parameters": model.num_parameters(),
    }
    _write_json(Path(args.log) if args.log else out.with_name(out.name + ".log.json"), result)
    _snapshot(args, out, {"backbone_config": cfg.to_json()})
    print(f"trained {cfg.epochs} epochs; final loss {result['final_loss']:.4f}, "
          f"reconstruction R2 {result['reconstruction_r2']:.4f}")
    return result


def _pick_anchors(records, num: int, arch_id: str | None, dataset_id: str | None):
    pool = [r for r in records if r.status == "ok"]
    if arch_id:
        pool = [r for r in pool if r.arch_id == arch_id]
    if dataset_id:
        pool = [r for r in pool if r.dataset_id == dataset_id]
    if not pool:
        raise ConfigError("no zoo records match the anchor selection")
    best = max(pool, key=lambda r: (r.test_accuracy, r.model_id))
    pool = [r for r in pool if r.arch_id == best.arch_id and r.dataset_id == best.dataset_id]
    pool.sort(key=lambda r: (-r.test_accuracy, r.model_id))
    return pool[:num]


def cmd_sample(args) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    b = load_backbone(args.backbone)
    records, specs, dsets = read_zoo(args.anchors)
    chosen = _pick_anchors(records, args.num_anchors, args.arch, args.dataset)
    arch = specs[chosen[0].arch_id]
    ds = dsets[chosen[0].dataset_id]
    anchors = [load_checkpoint(r.path) for r in chosen]
    anchor_set = embed_anchors(b, anchors, args.halo)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    generated = generate_weights(b, anchor_set, args.bandwidth, args.count, args.halo, rng)
    conditioned = [bn_condition(w, arch, ds, passes=args.bn_passes) for w in generated]
    scores = [evaluate_weights(w, arch, ds) for w in conditioned]
    kept = select_top(conditioned, scores, args.keep)
    candidates = []
    for i, (w, acc) in enumerate(zip(conditioned, scores)):
        name = f"sample_{i:03d}.safetensors"
        save_checkpoint(w, out / name)
        candidates.append({"file": name, "accuracy": acc})
    result = {
        "anchors": [{"model_id": r.model_id, "test_accuracy": r.test_accuracy} for r in chosen],
        "arch_id": arch.arch_id,
        "dataset_id": ds.dataset_id,
        "bandwidth": args.bandwidth,
        "halo": args.halo,
        "bn_passes": args.bn_passes,
        "candidates": candidates,
        "kept": [{"file": candidates[i]["file"], "accuracy": acc} for i, _, acc in kept],
    }
    _write_json(Path(args.result) if args.result else out / "sample.json", result)
    _snapshot(args, out)
    print(f"generated {args.count} models; kept {len(kept)}; best zero-shot accuracy {max(scores):.3f}")
    return result


def _zoo_settings(args) -> dict:
    raw = _load_json_config(args.config)
    input_dim = int(raw.get("input_dim", 8))
    num_classes = int(raw.get("num_classes", 2))
    specs = [ArchitectureSpec.from_json(s) for s in raw["specs"]] if "specs" in raw \
        else default_zoo_specs(input_dim, num_classes)
    dsets = [SyntheticDataset.from_json(d) for d in raw["datasets"]] if "datasets" in raw \
        else default_datasets(input_dim, num_classes)
    return {
        "specs": specs,
        "datasets": dsets,
        "epochs": int(args.epochs if args.epochs is not None else raw.get("epochs", 5)),
        "checkpoints_at": [int(e) for e in (args.checkpoints or raw.get("checkpoints_at", [1, 3, 5]))],
        "members": int(args.members if args.members is not None else raw.get("members", 2)),
        "lr": float(raw.get("lr", 0.05)),
    }


def cmd_zoo_generate(args) -> dict:
    out = Path(args.out)
    settings = _zoo_settings(args)
    records = generate_zoo(
        settings["specs"], settings["datasets"], settings["epochs"], settings["checkpoints_at"],
        seed=args.seed if args.seed is not None else 0, members=settings["members"],
        lr=settings["lr"], out_dir=out,
    )
    write_zoo(records, settings["specs"], settings["datasets"], out)
    ok = sum(r.status == "ok" for r in records)
    _snapshot(args, out, {
        "resolved": {**settings, "specs": [s.to_json() for s in settings["specs"]],
                     "datasets": [d.to_json() for d in settings["datasets"]]}
    })
    print(f"zoo: {ok} checkpoints ({len(records) - ok} diverged) in {out}")
    return {"records": ok}


def cmd_zoo_eval(args) -> dict:
    out = Path(args.out)
    records, specs, dsets = read_zoo(args.zoo)
    models = []
    if args.models:
        sample_path = Path(args.sample_json) if args.sample_json else Path(args.models) / "sample.json"
        sample = json.loads(sample_path.read_text(encoding="utf-8"))
        arch, ds = specs[sample["arch_id"]], dsets[sample["dataset_id"]]
        for cand in sample["kept"]:
            w = load_checkpoint(Path(args.models) / cand["file"])
            tuned = finetune(w, arch, ds, args.finetune_epochs, lr=args.lr, seed=args.seed or 0) \
                if args.finetune_epochs > 0 else []
            models.append({"file": cand["file"], "zero_shot": evaluate_weights(w, arch, ds),
                           "finetuned": tuned})
    else:
        for r in records:
            w = load_checkpoint(r.path)
            acc = evaluate_weights(w, specs[r.arch_id], dsets[r.dataset_id])
            models.append({"model_id": r.model_id, "zero_shot": acc, "recorded": r.test_accuracy,
                           "finetuned": []})
    result = {"models": models}
    _write_json(out, result)
    _snapshot(args, out)
    print(f"evaluated {len(models)} models")
    return result


def cmd_probe(args) -> dict:
    out = Path(args.out)
    records, _, _ = read_zoo(args.zoo)
    records = [r for r in records if r.status == "ok"]
    b = load_backbone(args.backbone)
    untrained = build_backbone(b.cfg)
    untrained.eval()
    ckpts = [load_checkpoint(r.path) for r in records]
    y = probe_targets(records, args.target)
    emb = np.stack([mean_pool_embed(b, w) for w in ckpts])
    emb0 = np.stack([mean_pool_embed(untrained, w) for w in ckpts])
    seed = args.seed if args.seed is not None else 0
    result = {
        "target": args.target,
        "num_records": len(records),
        "split_seed": seed,
        "r2": linear_probe(emb, y, seed),
        "r2_untrained": linear_probe(emb0, y, seed),
    }
    _write_json(out, result)
    _snapshot(args, out)
    print(f"probe {args.target}: R2 {result['r2']:.4f} (untrained {result['r2_untrained']:.4f})")
    return result


def cmd_report(args) -> dict:
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.json"
    try:
        report = pipeline_report(args.run_dir)
    except PartialReport as exc:
        _write_json(out, exc.report)
        raise
    _write_json(out, report)
    print(f"report written to {out}")
    return report


def cmd_pipeline(args) -> dict:
    """Smoke run: zoo -> ingest -> tokenize -> train -> sample -> eval -> probe -> report."""
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    common = ["--seed", str(seed)]
    steps = [
        ["zoo", "generate", "--out", str(run / "zoo"), "--epochs", "5", "--checkpoints", "1", "3", "5",
         "--members", "2"] + common,
        ["ingest", "--dir", str(run / "zoo"), "--token-size", str(args.token_size),
         "--out", str(run / "ingest.json")],
        ["tokenize", "--dir", str(run / "zoo"), "--scheme", args.scheme, "--token-size",
         str(args.token_size), "--out", str(run / "tokens")],
        ["train", "--data", str(run / "tokens"), "--out", str(run / "backbone.st"), "--epochs",
         str(args.epochs), "--log", str(run / "train.json")] + common
        + (["--config", args.config] if args.config else []),
        ["sample", "--backbone", str(run / "backbone.st"), "--anchors", str(run / "zoo"), "--count",
         str(args.count), "--keep", str(args.keep), "--bandwidth", str(args.bandwidth), "--halo",
         str(args.halo), "--out", str(run / "samples"), "--result", str(run / "sample.json")] + common,
        ["zoo", "eval", "--zoo", str(run / "zoo"), "--models", str(run / "samples"),
         "--sample-json", str(run / "sample.json"), "--finetune-epochs", "1",
         "--out", str(run / "eval.json")] + common,
        ["probe", "--zoo", str(run / "zoo"), "--backbone", str(run / "backbone.st"), "--target",
         "epoch", "--out", str(run / "probe.json")] + common,
        ["report", "--run-dir", str(run)],
    ]
    for argv in steps:
        code = run_cli(argv)
        if code != 0:
            raise WeightSpaceError(f"stage `{' '.join(argv[:2])}` failed with exit code {code}")
    return json.loads((run / "report.json").read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed")
    common.add_argument("--config", default=None, help="JSON configuration file")

    p = _Parser(prog="weightspace", description="Weight-space learning on model checkpoints.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("ingest", parents=[common], help="sanity-check a checkpoint directory")
    s.add_argument("--dir", required=True)
    s.add_argument("--token-size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("tokenize", parents=[common], help="tokenize a checkpoint directory")
    s.add_argument("--dir", required=True)
    s.add_argument("--scheme", choices=["dense", "sparse"], default="dense")
    s.add_argument("--token-size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train", parents=[common], help="train a backbone on tokenized data")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--log", default=None, help="training result JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="generate weights around zoo anchors")
    s.add_argument("--backbone", required=True)
    s.add_argument("--anchors", required=True, help="zoo directory holding the anchors")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--keep", type=int, default=2)
    s.add_argument("--bandwidth", type=float, default=0.05)
    s.add_argument("--halo", type=int, default=8)
    s.add_argument("--num-anchors", type=int, default=3)
    s.add_argument("--arch", default=None)
    s.add_argument("--dataset", default=None)
    s.add_argument("--bn-passes", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--result", default=None, help="result JSON path (default OUT/sample.json)")
    s.set_defaults(func=cmd_sample)

    z = sub.add_parser("zoo", help="generate or evaluate a synthetic model zoo")
    zsub = z.add_subparsers(dest="zoo_command", parser_class=_Parser, required=True)
    s = zsub.add_parser("generate", parents=[common])
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--checkpoints", type=int, nargs="+", default=None)
    s.add_argument("--members", type=int, default=None)
    s.set_defaults(func=cmd_zoo_generate)
    s = zsub.add_parser("eval", parents=[common])
    s.add_argument("--zoo", required=True)
    s.add_argument("--models", default=None, help="sample output directory to evaluate")
    s.add_argument("--sample-json", default=None)
    s.add_argument("--finetune-epochs", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_zoo_eval)

    s = sub.add_parser("probe", parents=[common], help="linear probe on mean-pooled embeddings")
    s.add_argument("--zoo", required=True)
    s.add_argument("--backbone", required=True)
    s.add_argument("--target", choices=["accuracy", "ggap", "epoch"], default="accuracy")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("report", parents=[common], help="merge stage outputs of a run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", parents=[common], help="end-to-end smoke run")
    s.add_argument("--out", required=True)
    s.add_argument("--token-size", type=int, default=32)
    s.add_argument("--scheme", choices=["dense", "sparse"], default="dense")
    s.add_argument("--epochs", type=int, default=2)
    s.add_argument("--count", type=int, default=2)
    s.add_argument("--keep", type=int, default=2)
    s.add_argument("--bandwidth", type=float, default=0.05)
    s.add_argument("--halo", type=int, default=8)
    s.set_defaults(func=cmd_pipeline)
    return p


def _set_threads() -> None:
    raw = os.environ.get("WEIGHTSPACE_THREADS")
    try:
        n = max(1, int(raw)) if raw else 1
    except ValueError:
        n = 1
    torch.set_num_threads(n)


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    _set_threads()
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WeightSpaceError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def run(argv: Sequence[str] | None = None) -> int:
    return run_cli(argv)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
