"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Every configuration below was fixed before its measured run.
"""

import json
import math
import sys
import time
from collections import defaultdict

import numpy as np
import pytest
import torch
from scipy.stats import ks_2samp

from weightspace.backbone import (
    BackboneConfig,
    Window,
    build_backbone,
    contrastive_loss,
    gradient_check,
    reconstruction_r2,
    train,
)
from weightspace.checkpoint_store import WeightCheckpoint, collection_stats, save_checkpoint
from weightspace.cli import run as cli_run
from weightspace.normalizer import masked_stats, mln_loss
from weightspace.report import strip_volatile
from weightspace.sampler import bn_condition, embed_anchors, generate_weights, reconstruct_checkpoint
from weightspace.tokenizer import Scheme, detokenize, padding_fraction, tokenize
from weightspace.zoo import (
    ArchitectureSpec,
    DatasetArrays,
    SyntheticDataset,
    default_datasets,
    default_zoo_specs,
    evaluate_weights,
    finetune,
    generate_zoo,
    linear_probe,
    mean_pool_embed,
    probe_targets,
)

torch.set_num_threads(1)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""

    def _verdict(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return _verdict


# copy-task backbone shared by criteria 6 and 8
COPY_CFG = dict(d_t=8, model_dim=48, latent_dim=8, num_layers=1, num_heads=2, window_size=16,
                subsample_size=4, epochs=200, learning_rate=3e-3, batch_size=4)
TINY_DS = SyntheticDataset("blobs-4d", "blobs", 2, 4, seed=3)


def test_c01_round_trip(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    failures = 0
    for case in range(500):
        n_layers = int(rng.integers(1, 6))
        arrays = []
        for i in range(n_layers):
            shape = tuple(int(s) for s in rng.integers(1, 9, size=int(rng.integers(1, 5))))
            arrays.append((f"l{i}", rng.normal(size=shape).astype(np.float32)))
        ckpt = WeightCheckpoint.from_arrays(arrays)
        d_t = int(rng.integers(1, 65))
        for scheme in Scheme:
            if detokenize(tokenize(ckpt, d_t, scheme), ckpt.layout) != ckpt:
                failures += 1
    elapsed = time.perf_counter() - start
    verdict(1, "tokenization round trip", failures == 0 and elapsed < 30,
            f"{failures} mismatches in 500 cases x 2 schemes, {elapsed:.1f}s")


def test_c02_padding_dominance(verdict, tmp_path):
    specs, dsets = default_zoo_specs(), default_datasets()
    paths = []
    for r in generate_zoo(specs, dsets, 5, [1, 3, 5], seed=0):
        p = tmp_path / f"{r.model_id}.st"
        save_checkpoint(r.checkpoint, p)
        paths.append(p)
    stats = collection_stats(paths, 32)
    hand = WeightCheckpoint.from_arrays([("w", np.arange(1, 16, dtype=np.float32).reshape(3, 5))])
    dense, sparse = padding_fraction(tokenize(hand, 4, "dense")), padding_fraction(tokenize(hand, 4, "sparse"))
    ok = stats.padding_fraction_dense < stats.padding_fraction_sparse and dense == 0.0625 and sparse == 0.375
    verdict(2, "padding dominance", ok,
            f"zoo dense {stats.padding_fraction_dense:.4f} < sparse {stats.padding_fraction_sparse:.4f}; "
            f"hand case {dense} vs {sparse}")


def test_c03_mln(verdict):
    t = np.array([[1.0, 3.0], [2.0, 0.0]])
    m = np.array([[1, 1], [1, 0]])
    s = masked_stats(t, m)
    loss = mln_loss(t + m, t, m)
    fixture_ok = (abs(s.mean - 2) < 1e-6 and abs(s.std - math.sqrt(2 / 3)) < 1e-6
                  and abs(loss - 1.5) < 1e-6)
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(100):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        mask = (rng.random(shape) < 0.7).astype(np.uint8)
        mask.flat[0] = 1
        target = rng.normal(size=shape) * mask
        pred = target + rng.normal(size=shape) * 0.3
        junk_t = np.where(mask == 1, target, rng.normal(scale=100, size=shape))
        junk_p = np.where(mask == 1, pred, rng.normal(scale=100, size=shape))
        if masked_stats(junk_t, mask) != masked_stats(target, mask) or \
                mln_loss(junk_p, junk_t, mask) != mln_loss(pred, target, mask):
            bad += 1
    verdict(3, "MLN correctness", fixture_ok and bad == 0,
            f"mean {s.mean:.6f} std {s.std:.6f} loss {loss:.6f}; {bad}/100 pad corruptions changed output")


def test_c04_gradient_check(verdict):
    cfg = BackboneConfig(d_t=4, model_dim=12, latent_dim=4, num_layers=1, num_heads=2,
                         window_size=8, subsample_size=8, seed=0)
    b = build_backbone(cfg)
    rng = np.random.default_rng(0)
    windows = []
    for i in range(2):
        seq = tokenize(WeightCheckpoint.from_arrays([("w", rng.normal(size=(2, 5)).astype(np.float32))]),
                       4, "sparse")
        windows.append(Window(seq.tokens, seq.mask, seq.positions, f"m{i}"))
    start = time.perf_counter()
    err = gradient_check(b, windows, 1e-4, loss="combined")
    elapsed = time.perf_counter() - start
    verdict(4, "gradient check", err < 1e-3 and elapsed < 60,
            f"max rel err {err:.2e} over {b.num_parameters()} params, {elapsed:.1f}s")


def _nt_xent_oracle(za, zb, t):
    z = np.concatenate([za, zb])
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n, half = len(z), len(z) // 2
    sims = z @ z.T / t
    out = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        logits = sims[i, others]
        mx = logits.max()
        lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
        out += lse - sims[i, (i + half) % n]
    return out / n


def test_c05_contrastive(verdict):
    e = np.eye(2)
    closed = contrastive_loss(e, e, 1.0)
    target = math.log((math.e + 2) / math.e)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        b = int(rng.integers(2, 9))
        za, zb = rng.normal(size=(b, 6)), rng.normal(size=(b, 6))
        t = float(rng.uniform(0.05, 1.0))
        worst = max(worst, abs(contrastive_loss(za, zb, t) - _nt_xent_oracle(za, zb, t)))
    verdict(5, "contrastive closed form", abs(closed - target) < 1e-6 and worst < 1e-9,
            f"B=2 loss {closed:.9f} vs {target:.9f}; oracle max diff {worst:.1e}")


def test_c06_copy_task(verdict):
    start = time.perf_counter()
    arch = ArchitectureSpec("tiny", "mlp", (8,), 4, 2)
    recs = generate_zoo([arch], [TINY_DS], 5, [5], seed=0, members=20)
    seqs = [tokenize(r.checkpoint, 8, "dense") for r in recs]
    train_seqs, held_out = seqs[:16], seqs[16:]
    b, log = train(train_seqs, BackboneConfig(**COPY_CFG))
    first, last = log.epochs[0]["reconstruction"], log.epochs[-1]["reconstruction"]
    drop = 1 - last / first
    r2 = reconstruction_r2(b, held_out)
    elapsed = time.perf_counter() - start
    verdict(6, "copy-task learning", drop >= 0.5 and r2 > 0.9 and elapsed < 600,
            f"reconstruction loss {first:.4f} -> {last:.4f} (drop {drop:.1%}), "
            f"held-out R2 {r2:.4f}, {elapsed:.1f}s")


def test_c07_distribution_matching(verdict):
    specs, dsets = default_zoo_specs(), default_datasets()
    recs = generate_zoo(specs, dsets, 5, [5], seed=0, members=4)
    ckpts = [r.checkpoint for r in recs]
    seqs = [tokenize(c, 32, "dense") for c in ckpts]
    recon = {}
    for norm in ("mln", "none"):
        b, _ = train(seqs, BackboneConfig(epochs=100, loss_norm=norm, seed=0))
        recon[norm] = [reconstruct_checkpoint(b, c) for c in ckpts]
    by_arch = defaultdict(list)
    for i, r in enumerate(recs):
        by_arch[r.arch_id].append(i)
    wins = total = 0
    for arch_id, idx in by_arch.items():
        for name in ckpts[idx[0]].names():
            if name in ckpts[idx[0]].non_trainable_names:
                continue
            orig = np.concatenate([ckpts[i][name].ravel() for i in idx])
            ks = {norm: ks_2samp(orig, np.concatenate([recon[norm][i][name].ravel() for i in idx])).statistic
                  for norm in recon}
            wins += ks["mln"] < ks["none"]
            total += 1
    frac = wins / total
    verdict(7, "distribution matching", frac >= 0.6,
            f"MLN has lower KS on {wins}/{total} layers ({frac:.0%}, need >= 60%)")


def test_c08_generative(verdict):
    arch = ArchitectureSpec("tiny-bn", "mlp", (8,), 4, 2, has_bn=True)
    recs = generate_zoo([arch], [TINY_DS], 5, [3, 4, 5], seed=0, members=20)
    anchor_recs = [r for r in recs if "__m19__" in r.model_id]
    train_recs = [r for r in recs if "__m19__" not in r.model_id]
    b, _ = train([tokenize(r.checkpoint, 8, "dense") for r in train_recs], BackboneConfig(**COPY_CFG))
    anchors = [r.checkpoint for r in anchor_recs]
    anchor_acc = float(np.mean([r.test_accuracy for r in anchor_recs]))

    generated = generate_weights(b, embed_anchors(b, anchors), 0.05, 5, 0, np.random.default_rng(0))
    generated = [bn_condition(w, arch, TINY_DS) for w in generated]
    zero_shot = [evaluate_weights(w, arch, TINY_DS) for w in generated]
    tuned = [finetune(w, arch, TINY_DS, 5)[-1] for w in generated]

    (ident,) = generate_weights(b, embed_anchors(b, anchors[:1]), 1e-12, 1, 0, np.random.default_rng(1))
    rec = reconstruct_checkpoint(b, anchors[0])
    ident_err = max(float(np.abs(ident[n] - rec[n]).max())
                    for n in rec.names() if n not in rec.non_trainable_names)

    ok = (min(zero_shot) > 0.5 and max(abs(a - anchor_acc) for a in tuned) <= 0.05 and ident_err <= 1e-5)
    verdict(8, "generative sanity", ok,
            f"anchors {anchor_acc:.3f}; zero-shot {[round(a, 3) for a in zero_shot]}; "
            f"finetuned {[round(a, 3) for a in tuned]}; identity err {ident_err:.1e}")


def test_c09_bn_conditioning(verdict):
    arch = ArchitectureSpec("one", "mlp", (1,), 1, 2, has_bn=True)
    w = arch.init_weights(0).replace_data({"fc0.weight": np.ones((1, 1)), "fc0.bias": np.zeros(1)})
    x = np.array([[0.5], [1.5], [1.0], [1.0]], np.float32)
    data = DatasetArrays(x, np.array([0, 1, 0, 1]), x, np.array([0, 1, 0, 1]), 2)
    errs, untouched = [], True
    for k in (1, 2, 5):
        out = bn_condition(w, arch, data, passes=k, momentum=0.1)
        errs.append(abs(float(out["bn0.running_mean"][0]) - (1 - 0.9**k)))
        untouched &= all(out[n].tobytes() == w[n].tobytes()
                         for n in w.names() if n not in w.non_trainable_names)
    verdict(9, "BN conditioning closed form", max(errs) < 1e-6 and untouched,
            f"EMA errors {['%.1e' % e for e in errs]}; trainable bitwise unchanged: {untouched}")


PROBE_CFG = dict(d_t=8, model_dim=48, latent_dim=16, num_layers=2, num_heads=2, window_size=16,
                 subsample_size=4, epochs=100, learning_rate=3e-3, batch_size=4)


def test_c10_probe_direction(verdict):
    arch = ArchitectureSpec("tiny", "mlp", (8,), 4, 2)
    recs = generate_zoo([arch], [TINY_DS], 9, [1, 3, 5, 7, 9], seed=0, members=40, lr=0.005)
    y = probe_targets(recs, "epoch")
    seqs = [tokenize(r.checkpoint, 8, "dense") for r in recs]
    rows, ok = [], len(recs) >= 60
    for seed in range(3):
        cfg = BackboneConfig(**PROBE_CFG, seed=seed)
        trained, _ = train(seqs, cfg)
        untrained = build_backbone(cfg)
        r2 = linear_probe(np.stack([mean_pool_embed(trained, r.checkpoint) for r in recs]), y, seed)
        r2_0 = linear_probe(np.stack([mean_pool_embed(untrained, r.checkpoint) for r in recs]), y, seed)
        ok &= r2 > r2_0
        rows.append(f"seed {seed}: {r2:.3f} vs {r2_0:.3f}")
    verdict(10, "probe direction", ok, f"{len(recs)} records; trained vs untrained R2 " + "; ".join(rows))


def test_c11_determinism(verdict, tmp_path):
    start = time.perf_counter()
    codes = [cli_run(["pipeline", "--out", str(tmp_path / name), "--seed", "7"]) for name in ("a", "b")]
    reports = [json.loads((tmp_path / name / "report.json").read_text()) for name in ("a", "b")]
    same = strip_volatile(reports[0]) == strip_volatile(reports[1])
    elapsed = time.perf_counter() - start
    verdict(11, "CLI determinism", codes == [0, 0] and same and elapsed < 900,
            f"exit codes {codes}; reports identical except timestamps: {same}; {elapsed:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
