"""Training loop, warmup-cosine schedule, evaluation, and the ablation grid."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dataset_io import iter_samples, read_meta, read_tree
from .metrics import MetricTable, evaluate_stratified, write_report
from .models import (
    CropClassifier,
    HsiEncoderConfig,
    ModalityConfig,
    ModelConfig,
    MsiEncoderConfig,
    composite_loss,
    load_checkpoint,
    save_checkpoint,
)
from .splitting import SplitAssignment
from .synthgen import Sample, random_augment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    start: float = 6e-7
    peak: float = 6e-5
    warmup: int = 1000
    final: float = 6e-6
    total: int = 10000

    def validate(self) -> None:
        if not (self.start <= self.peak and self.final <= self.peak):
            raise ValueError("schedule needs start <= peak and final <= peak")
        if not 0 <= self.warmup <= self.total:
            raise ValueError("schedule needs 0 <= warmup <= total")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from start to peak, then cosine decay to final."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup:
        return cfg.start + (cfg.peak - cfg.start) * step / cfg.warmup
    span = max(1, cfg.total - cfg.warmup)
    t = min(step - cfg.warmup, span) / span
    return cfg.final + 0.5 * (cfg.peak - cfg.final) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class ModelScale:
    """Architecture knobs independent of dataset dimensions."""

    out_dim: int = 128  # E
    hsi_embed_dim: int = 768
    hsi_depth: int = 6
    hsi_heads: int = 12
    spectral_pool: tuple[int, int] = (4, 4)
    spectral_dim: int = 256
    spectral_depth: int = 6
    spectral_heads: int = 8
    msi_base_dim: int = 128  # E_S
    msi_depths: tuple[int, ...] = (2, 2, 6, 2)
    msi_heads: tuple[int, ...] = (4, 8, 16, 32)
    patch_t: int = 2
    patch_s: int = 4
    window_spatial: int = 7
    window_temporal: int = 2
    mlp_ratio: float = 4.0
    use_pos: bool = True
    use_rel_pos: bool = True


@dataclass(frozen=True)
class RunConfig:
    modality: ModalityConfig = field(default_factory=ModalityConfig)
    scale: ModelScale = field(default_factory=ModelScale)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    months_used: int = 12
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    weight_decay: float = 0.05
    augment: bool = False
    crop_size: Optional[int] = None
    average: str = "macro"
    deterministic: bool = True

    def label(self) -> str:
        return self.modality.label()


def build_model_config(
    meta: dict, run: RunConfig, level_sizes: Sequence[int]
) -> ModelConfig:
    """Assemble encoder configs from dataset dimensions plus the run's scale."""
    s = run.scale
    t_total, c_msi = meta["msi_shape"][0], meta["msi_shape"][1]
    h, w = meta["image_shape"]
    if run.months_used > t_total:
        raise ValueError(f"months_used={run.months_used} exceeds dataset T={t_total}")
    size = (run.crop_size, run.crop_size) if run.crop_size else (h, w)
    msi = MsiEncoderConfig(
        bands=c_msi,
        months=run.months_used,
        image_size=size,
        patch_t=s.patch_t,
        patch_s=s.patch_s,
        base_dim=s.msi_base_dim,
        depths=s.msi_depths,
        heads=s.msi_heads,
        window_spatial=s.window_spatial,
        window_temporal=s.window_temporal,
        mlp_ratio=s.mlp_ratio,
        out_dim=s.out_dim,
        use_rel_pos=s.use_rel_pos,
    )
    hsi = None
    if run.modality.use_hyper:
        ratio = meta["ratio"]
        hsi = HsiEncoderConfig(
            bands=meta["hsi_shape"][0],
            input_size=(size[0] // ratio, size[1] // ratio),
            output_size=size,
            embed_dim=s.hsi_embed_dim,
            depth=s.hsi_depth,
            heads=s.hsi_heads,
            spectral_pool=s.spectral_pool,
            spectral_dim=s.spectral_dim,
            spectral_depth=s.spectral_depth,
            spectral_heads=s.spectral_heads,
            out_dim=s.out_dim,
            mlp_ratio=s.mlp_ratio,
            use_pos=s.use_pos,
        )
    return ModelConfig(
        level_sizes=tuple(level_sizes), msi=msi, hsi=hsi, modality=run.modality
    )


def to_tensors(sample: Sample, months: int, device=None) -> dict:
    """Channels-last tensors for one sample, truncated to ``months`` frames."""
    msi = np.ascontiguousarray(sample.msi[:months].transpose(0, 2, 3, 1))
    out = {
        "msi": torch.from_numpy(msi).float(),
        "hsi": torch.from_numpy(
            np.ascontiguousarray(sample.hsi.transpose(1, 2, 0))
        ).float(),
        "labels": torch.from_numpy(sample.labels.astype(np.int64)),
        "prior": torch.from_numpy(sample.prior.astype(np.int64)),
    }
    return out


def collate(batch: list[dict]) -> dict:
    return {k: torch.stack([b[k] for b in batch]) for k in batch[0]}


def _crop_sample(sample: Sample, size: int, rng: np.random.Generator) -> Sample:
    r = sample.ratio
    h, w = sample.labels.shape[1:]
    if size > h or size > w or size % r:
        raise ValueError(f"crop size {size} incompatible with {h}x{w} at ratio {r}")
    y0 = int(rng.integers(0, (h - size) // r + 1)) * r
    x0 = int(rng.integers(0, (w - size) // r + 1)) * r
    return replace(
        sample,
        hsi=sample.hsi[:, y0 // r : (y0 + size) // r, x0 // r : (x0 + size) // r],
        msi=sample.msi[:, :, y0 : y0 + size, x0 : x0 + size],
        labels=sample.labels[:, y0 : y0 + size, x0 : x0 + size],
        prior=sample.prior[:, y0 : y0 + size, x0 : x0 + size],
        parcels=(),
    )


def _center_crop(sample: Sample, size: tuple[int, int]) -> Sample:
    """Deterministic aligned crop used when a model was trained on crops."""
    r = sample.ratio
    h, w = sample.labels.shape[1:]
    if (h, w) == size:
        return sample
    y0 = ((h - size[0]) // 2) // r * r
    x0 = ((w - size[1]) // 2) // r * r
    return replace(
        sample,
        hsi=sample.hsi[:, y0 // r : (y0 + size[0]) // r, x0 // r : (x0 + size[1]) // r],
        msi=sample.msi[:, :, y0 : y0 + size[0], x0 : x0 + size[1]],
        labels=sample.labels[:, y0 : y0 + size[0], x0 : x0 + size[1]],
        prior=sample.prior[:, y0 : y0 + size[0], x0 : x0 + size[1]],
        parcels=(),
    )


def forward_batch(model: CropClassifier, batch: dict):
    return model(
        batch["msi"],
        batch["hsi"] if model.cfg.modality.use_hyper else None,
        batch["prior"] if model.cfg.modality.use_prior else None,
    )


def predict_stack(model: CropClassifier, batch: dict) -> np.ndarray:
    """[B, 4, H, W] argmax id rasters (uint16)."""
    with torch.no_grad():
        out = forward_batch(model, batch)
    return out.argmax_stack().numpy().astype(np.uint16)


def evaluate_model(
    model: CropClassifier,
    samples: Sequence[Sample],
    months: int,
    average: str = "macro",
    batch_size: int = 4,
) -> dict[str, MetricTable]:
    """Stratified metric tables over a sample list."""
    model.eval()
    size = model.cfg.msi.image_size
    samples = [_center_crop(s, size) for s in samples]
    triples = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        batch = collate([to_tensors(s, months) for s in chunk])
        preds = predict_stack(model, batch)
        for s, p in zip(chunk, preds):
            triples.append((p, s.labels, s.prior))
    return evaluate_stratified(triples, model.cfg.level_sizes, average=average)


@dataclass
class TrainResult:
    history: list[dict]
    best_f1: float
    best_epoch: int
    checkpoint_dir: Path
    run_dir: Path


def _write_history(path: Path, rows: list[dict], run: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# months_used={run.months_used} config={run.label()} seed={run.seed}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def train(
    run: RunConfig,
    dataset_root: str | Path,
    splits: SplitAssignment,
    work_dir: str | Path,
) -> TrainResult:
    """Train one configuration; checkpoint at the best validation F1."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    meta = read_meta(dataset_root)
    tree = read_tree(dataset_root)

    torch.manual_seed(run.seed)
    if run.deterministic:
        torch.set_num_threads(max(1, torch.get_num_threads()))
        torch.use_deterministic_algorithms(True)

    model_cfg = build_model_config(meta, run, tree.level_sizes)
    model = CropClassifier(model_cfg)
    schedule = run.schedule
    steps_per_epoch = max(1, math.ceil(len(splits.train) / run.batch_size))
    if schedule.total != run.epochs * steps_per_epoch:
        schedule = replace(schedule, total=run.epochs * steps_per_epoch)
        if schedule.warmup > schedule.total:
            schedule = replace(schedule, warmup=schedule.total)
    schedule.validate()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=schedule.start, weight_decay=run.weight_decay
    )

    train_samples = list(iter_samples(dataset_root, splits.train))
    val_samples = list(iter_samples(dataset_root, splits.val))
    cache = None
    if not run.augment and not run.crop_size:
        cache = [to_tensors(s, run.months_used) for s in train_samples]

    (work_dir / "run.json").write_text(json.dumps(asdict(run), indent=1))
    history: list[dict] = []
    best_f1, best_epoch = -1.0, -1
    ckpt_dir = work_dir / "checkpoints" / "best"
    step = 0
    started = time.time()

    for epoch in range(run.epochs):
        model.train()
        rng = np.random.default_rng([run.seed, 101, epoch])
        order = rng.permutation(len(train_samples))
        epoch_loss, n_batches = 0.0, 0
        for b0 in range(0, len(order), run.batch_size):
            idx = order[b0 : b0 + run.batch_size]
            if cache is not None:
                batch = collate([cache[i] for i in idx])
            else:
                items = []
                for i in idx:
                    s = train_samples[i]
                    if run.augment:
                        partner = train_samples[int(rng.integers(len(train_samples)))]
                        s = random_augment(s, rng, partner=partner)
                    if run.crop_size:
                        s = _crop_sample(s, run.crop_size, rng)
                    items.append(to_tensors(s, run.months_used))
                batch = collate(items)
            lr = lr_at(step, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            out = forward_batch(model, batch)
            loss = composite_loss(out, batch["labels"]).total
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {b0 // run.batch_size} "
                    f"(lr={lr:.3e})"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
            step += 1

        tables = evaluate_model(
            model, val_samples, run.months_used, average=run.average
        ) if val_samples else None
        row = {
            "epoch": epoch,
            "loss": epoch_loss / n_batches,
            "lr": lr_at(step - 1, schedule),
        }
        if tables:
            allt = tables["all"]
            for k in range(1, 5):
                row[f"f1_level{k}"] = allt.levels[k].f1
            row["f1_mean"] = allt.mean_f1
            if allt.mean_f1 > best_f1:
                best_f1, best_epoch = allt.mean_f1, epoch
                save_checkpoint(
                    model,
                    ckpt_dir,
                    extra={"best_f1": best_f1, "epoch": epoch, "seed": run.seed},
                )
        history.append(row)
        _write_history(work_dir / "history.csv", history, run)

    if best_epoch < 0:  # no validation split; keep the final weights
        best_f1 = float("nan")
        save_checkpoint(model, ckpt_dir, extra={"epoch": run.epochs - 1, "seed": run.seed})
    logger.info(
        "run %s: best f1 %.4f at epoch %d (%.1fs)",
        run.label(),
        best_f1,
        best_epoch,
        time.time() - started,
    )
    return TrainResult(
        history=history,
        best_f1=best_f1,
        best_epoch=best_epoch,
        checkpoint_dir=ckpt_dir,
        run_dir=work_dir,
    )


def evaluate_checkpoint(
    checkpoint_dir: str | Path,
    dataset_root: str | Path,
    sample_ids: Sequence[str],
    out_dir: Optional[str | Path] = None,
    average: str = "macro",
    dump_predictions: bool = False,
    dump_probabilities: bool = False,
    config_label: str = "",
) -> dict[str, MetricTable]:
    """Evaluate a saved checkpoint; optionally write report files and dumps."""
    model = load_checkpoint(checkpoint_dir)
    months = model.cfg.msi.months
    samples = list(iter_samples(dataset_root, sample_ids))
    tables = evaluate_model(model, samples, months, average=average)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for name, table in tables.items():
            rows.extend(table.rows(config=config_label or model.cfg.modality.label()))
        write_report(rows, out_dir / "report.csv", out_dir / "report.json")
        if dump_predictions or dump_probabilities:
            for s in samples:
                batch = collate([to_tensors(_center_crop(s, model.cfg.msi.image_size), months)])
                d = out_dir / "predictions" / s.sample_id
                d.mkdir(parents=True, exist_ok=True)
                if dump_predictions:
                    pred = predict_stack(model, batch)[0]
                    pred.astype("<u2").tofile(d / "pred.bin")
                if dump_probabilities:
                    with torch.no_grad():
                        out = forward_batch(model, batch)
                    arrays = {
                        f"level{k}": out.probabilities(k)[0].numpy().astype(np.float32)
                        for k in range(1, 5)
                    }
                    np.savez_compressed(d / "probs.npz", **arrays)
    return tables


GRID_AXES = ("use_hyper", "use_prior", "heads_mode", "months_used")


def run_ablation_grid(
    base: RunConfig,
    axes: dict[str, list],
    dataset_root: str | Path,
    splits: SplitAssignment,
    out_root: str | Path,
    eval_split: str = "test",
) -> dict:
    """One train+eval per grid cell; emits per-cell metrics and delta rows.

    Cells that fail are recorded and skipped; remaining cells still run.
    Every cell reseeds from its own config, so results are independent
    of execution order.
    """
    bad = set(axes) - set(GRID_AXES)
    if bad:
        raise ValueError(f"unknown grid axes {sorted(bad)}; supported: {GRID_AXES}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    names = sorted(axes)
    cells = []
    for values in itertools.product(*(axes[n] for n in names)):
        override = dict(zip(names, values))
        modality = replace(
            base.modality,
            **{k: v for k, v in override.items() if k in ("use_hyper", "use_prior", "heads_mode")},
        )
        run = replace(
            base,
            modality=modality,
            months_used=override.get("months_used", base.months_used),
        )
        cell_id = "_".join(f"{n}-{v}" for n, v in zip(names, values))
        cells.append((cell_id, override, run))

    results = []
    for cell_id, override, run in cells:
        cell_dir = out_root / cell_id
        record = {"cell": cell_id, **override, "config": run.label()}
        try:
            result = train(run, dataset_root, splits, cell_dir)
            ids = getattr(splits, eval_split)
            tables = evaluate_checkpoint(
                result.checkpoint_dir,
                dataset_root,
                ids,
                out_dir=cell_dir / "eval",
                average=run.average,
                config_label=run.label(),
            )
            record["val_best_f1"] = result.best_f1
            for name, table in tables.items():
                record[f"{name}_f1_mean"] = table.mean_f1
                for k in range(1, 5):
                    record[f"{name}_f1_level{k}"] = table.levels[k].f1
        except Exception as exc:  # keep the rest of the grid alive
            logger.exception("grid cell %s failed", cell_id)
            record["error"] = str(exc)
        results.append(record)

    deltas = compute_deltas(results, names)
    payload = {"axes": axes, "cells": results, "deltas": deltas}
    (out_root / "grid.json").write_text(json.dumps(payload, indent=1))
    return payload


def compute_deltas(results: list[dict], axis_names: Sequence[str]) -> list[dict]:
    """F1 improvements along each boolean axis, other axes held fixed."""
    deltas = []
    for axis in ("use_hyper", "use_prior"):
        if axis not in axis_names:
            continue
        others = [n for n in axis_names if n != axis]
        by_key = {}
        for r in results:
            if "error" in r:
                continue
            by_key[(tuple(r[n] for n in others), r[axis])] = r
        for key in {k for (k, _) in by_key}:
            on, off = by_key.get((key, True)), by_key.get((key, False))
            if on is None or off is None:
                continue
            row = {"axis": axis, **dict(zip(others, key))}
            for col in ("all_f1_mean", "all_f1_level4", "all_f1_level1"):
                if col in on and col in off:
                    row[f"delta_{col}"] = on[col] - off[col]
            deltas.append(row)
    return deltas
