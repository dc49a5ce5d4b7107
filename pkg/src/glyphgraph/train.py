"""Three-phase progressive training, metrics, and rank-based evaluation.

Phase 1 trains everything except the patch encoder. Phase 2 additionally
unfreezes the last two encoder blocks. Phase 3 unfreezes the whole network
at a small learning rate (5e-6 by default). Per-epoch metrics stream to a
CSV; the final summary evaluates the trained model on both split sides.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import Config
from .data import build_vocabulary, materialize, split_dataset
from .errors import ConfigError
from .losses import LossWeights, loss_total
from .model import GlyphModel
from .optim import AdamW
from .snapshot import save_meta, save_snapshot

log = logging.getLogger("glyphgraph.train")

CSV_COLUMNS = ("epoch", "phase", "lr", "L_char", "L_comp", "L_struct", "L_sem", "L_total", "top1", "top10")

AUGMENT_SHIFT_PX = 3
AUGMENT_ROTATE_DEG = 10.0


def _rotate_nearest(pixels, degrees):
    """Nearest-neighbor rotation about the image center, zero-filled."""
    h, w = pixels.shape
    theta = np.radians(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.indices((h, w))
    ry = rows - cy
    rx = cols - cx
    src_r = np.rint(cy + cos_t * ry + sin_t * rx).astype(np.int64)
    src_c = np.rint(cx - sin_t * ry + cos_t * rx).astype(np.int64)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(pixels)
    out[valid] = pixels[src_r[valid], src_c[valid]]
    return out


def augment_pixels(pixels, rng):
    """Random small shift and rotation, matching the renderer's jitter range.

    Zero-filled shifts keep the black background; deterministic given rng.
    """
    dy = int(rng.integers(-AUGMENT_SHIFT_PX, AUGMENT_SHIFT_PX + 1))
    dx = int(rng.integers(-AUGMENT_SHIFT_PX, AUGMENT_SHIFT_PX + 1))
    degrees = float(rng.uniform(-AUGMENT_ROTATE_DEG, AUGMENT_ROTATE_DEG))
    out = _rotate_nearest(pixels, degrees) if abs(degrees) > 0.5 else pixels
    if dy or dx:
        shifted = np.zeros_like(out)
        src_r = slice(max(0, -dy), min(out.shape[0], out.shape[0] - dy))
        dst_r = slice(max(0, dy), max(0, dy) + (src_r.stop - src_r.start))
        src_c = slice(max(0, -dx), min(out.shape[1], out.shape[1] - dx))
        dst_c = slice(max(0, dx), max(0, dx) + (src_c.stop - src_c.start))
        shifted[dst_r, dst_c] = out[src_r, src_c]
        out = shifted
    return out


@dataclass
class Phase:
    index: int
    epochs: int
    lr: float
    patterns: list


@dataclass
class PhaseSchedule:
    phases: list

    @classmethod
    def default(cls, cfg):
        non_encoder = [
            "vision.adapters.*",
            "vision.region_attention.*",
            "vision.spatial.*",
            "vision.fusion.*",
            "builder.*",
            "reasoner.*",
            "heads.*",
        ]
        if cfg.use_query_pool:
            non_encoder.append("vision.pool.*")
        last_two = [
            f"vision.encoder.blocks.{i}.*"
            for i in range(max(cfg.encoder_blocks - 2, 0), cfg.encoder_blocks)
        ]
        epochs = cfg.phase_epochs
        lrs = cfg.phase_lrs
        return cls(
            phases=[
                Phase(1, int(epochs[0]), float(lrs[0]), non_encoder),
                Phase(2, int(epochs[1]), float(lrs[1]), non_encoder + last_two),
                Phase(3, int(epochs[2]), float(lrs[2]), ["*"]),
            ]
        )


@dataclass
class Metrics:
    top1: float = 0.0
    top10: float = 0.0
    loss_means: dict = field(default_factory=dict)
    epoch: int = 0

    def validate(self):
        if self.top1 > self.top10:
            raise AssertionError(f"top1 {self.top1} exceeds top10 {self.top10}")
        return self


def topk_hit(logits, label, k):
    """Rank classes by (-logit, index); hit when the label makes the top k."""
    better = int((logits > logits[label]).sum())
    ties_before = int((logits[:label] == logits[label]).sum())
    return better + ties_before < k


def evaluate(model, samples, threads=1):
    """Top-1/Top-10 accuracy and per-character counts on a sample list.

    Deterministic regardless of worker count: per-sample results are merged
    by index.
    """
    if not samples:
        raise ConfigError("evaluation split is empty")
    model.eval()

    def run_one(sample):
        out = model.forward(sample.pixels)
        logits = out.char_logits.data.reshape(-1)
        return (
            topk_hit(logits, sample.char_label, 1),
            topk_hit(logits, sample.char_label, min(10, logits.size)),
        )

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, samples))
    else:
        results = [run_one(s) for s in samples]

    per_char = {}
    hits1 = hits10 = 0
    for sample, (h1, h10) in zip(samples, results):
        hits1 += h1
        hits10 += h10
        n, c1, c10 = per_char.get(sample.char_id, (0, 0, 0))
        per_char[sample.char_id] = (n + 1, c1 + h1, c10 + h10)
    n = len(samples)
    metrics = Metrics(top1=hits1 / n, top10=hits10 / n).validate()
    return metrics, per_char


def run_phase(model, samples, phase, cfg, rng, rows, epoch_offset):
    """Train one phase; appends per-epoch metric rows, returns epoch count."""
    matched = model.set_trainable(phase.patterns)
    if matched == 0:
        raise ConfigError(f"phase {phase.index}: no trainable parameters selected")
    optimizer = AdamW(
        list(model.parameters()), lr=phase.lr, weight_decay=cfg.weight_decay
    )
    weights = LossWeights.from_config(cfg)
    n = len(samples)
    for epoch in range(phase.epochs):
        model.train()
        order = rng.permutation(n)
        sums = {"char": 0.0, "comp": 0.0, "struct": 0.0, "sem": 0.0, "total": 0.0}
        hits1 = hits10 = 0
        for start in range(0, n, cfg.batch):
            batch = [samples[int(i)] for i in order[start : start + cfg.batch]]
            optimizer.zero_grad()
            with T.tape() as tp:
                tp.watch_trainable(model.trainable_parameters())
                batch_total = None
                for sample in batch:
                    pixels = augment_pixels(sample.pixels, rng) if cfg.augment else sample.pixels
                    out = model.forward(pixels, rng=rng)
                    parts, total, _ = model.sample_losses(out, sample, weights)
                    for key in ("char", "comp", "struct", "sem"):
                        sums[key] += float(parts[key].data.reshape(()))
                    sums["total"] += total.item()
                    logits = out.char_logits.data.reshape(-1)
                    hits1 += topk_hit(logits, sample.char_label, 1)
                    hits10 += topk_hit(logits, sample.char_label, min(10, logits.size))
                    batch_total = total if batch_total is None else T.add(batch_total, total)
                tp.backward(T.scale(batch_total, 1.0 / len(batch)))
            optimizer.step()
        global_epoch = epoch_offset + epoch + 1
        rows.append(
            {
                "epoch": global_epoch,
                "phase": phase.index,
                "lr": phase.lr,
                "L_char": sums["char"] / n,
                "L_comp": sums["comp"] / n,
                "L_struct": sums["struct"] / n,
                "L_sem": sums["sem"] / n,
                "L_total": sums["total"] / n,
                "top1": hits1 / n,
                "top10": hits10 / n,
            }
        )
        log.info(
            "epoch %d (phase %d): loss %.4f top1 %.3f",
            global_epoch,
            phase.index,
            rows[-1]["L_total"],
            rows[-1]["top1"],
        )
    return phase.epochs


def _format_cell(value):
    return repr(value) if isinstance(value, float) else str(value)


def write_metrics_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in CSV_COLUMNS) + "\n")


def train(records, base_dir, cfg, out_dir, schedule=None):
    """Full training run: split, three phases, metrics, snapshot, summary.

    Returns (model, summary dict).
    """
    os.makedirs(out_dir, exist_ok=True)
    from .config import config_to_text

    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))

    vocab = build_vocabulary(records)
    split = split_dataset(records, mode=cfg.split_mode, seed=cfg.seed)
    train_samples = materialize(records, split.train, vocab, base_dir, cfg.input_size)
    test_samples = materialize(records, split.test, vocab, base_dir, cfg.input_size)

    model = GlyphModel(cfg, vocab)
    schedule = schedule or PhaseSchedule.default(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    epoch_offset = 0
    for phase in schedule.phases:
        epoch_offset += run_phase(model, train_samples, phase, cfg, rng, rows, epoch_offset)

    write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
    train_metrics, _ = evaluate(model, train_samples)
    test_metrics, _ = evaluate(model, test_samples) if test_samples else (Metrics(), {})
    summary = {
        "epochs": epoch_offset,
        "train_top1": train_metrics.top1,
        "train_top10": train_metrics.top10,
        "test_top1": test_metrics.top1,
        "test_top10": test_metrics.top10,
        "train_size": len(train_samples),
        "test_size": len(test_samples),
        "final_loss": rows[-1]["L_total"] if rows else None,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    snap_path = os.path.join(out_dir, "model.bin")
    save_snapshot(model, snap_path)
    save_meta(snap_path, cfg, vocab)
    return model, summary
