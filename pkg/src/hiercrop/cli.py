"""Command-line pipeline: synth, split, train, eval, report.

Every subcommand reads one JSON config (``--config``), applies dotted
``--set key=value`` overrides, and writes into ``--out``. Unknown config
keys exit with code 2; runtime failures exit 1. Relative paths resolve
against the config file's directory; ``HIERCROP_DATA_ROOT`` overrides
the base for dataset paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import dataset_io, taxonomy
from .models import ModalityConfig
from .splitting import SplitAssignment, frequency_aware_split
from .synthgen import SynthConfig, build_class_signals, generate_dataset, label_check
from .training import (
    ModelScale,
    RunConfig,
    ScheduleConfig,
    evaluate_checkpoint,
    run_ablation_grid,
    train,
)


class UsageError(Exception):
    """Config or invocation problems; mapped to exit code 2."""


# allowed keys per subcommand; None marks a leaf, dicts nest
SCHEMAS = {
    "synth": {
        "seed": None,
        "count": None,
        "taxonomy": None,
        "dims": {
            "hsi_bands": None,
            "hsi_size": None,
            "months": None,
            "msi_bands": None,
            "image_size": None,
        },
        "parcels_per_image": None,
        "parcel_cells": None,
        "change_fraction": None,
        "hsi_noise": None,
        "msi_noise": None,
        "parcel_gain_jitter": None,
        "signals": {
            "spectral_only_pairs": None,
            "temporal_only_pairs": None,
            "cross_twins": None,
        },
        "label_check_min_parcels": None,
    },
    "split": {"dataset": None, "ratios": None, "seed": None},
    "train": {
        "dataset": None,
        "splits": None,
        "grid": None,
        "run": {
            "modality": {"use_hyper": None, "use_prior": None, "heads_mode": None},
            "scale": {f.name: None for f in ModelScale.__dataclass_fields__.values()},
            "schedule": {"start": None, "peak": None, "warmup": None, "final": None, "total": None},
            "months_used": None,
            "batch_size": None,
            "epochs": None,
            "seed": None,
            "weight_decay": None,
            "augment": None,
            "crop_size": None,
            "average": None,
            "deterministic": None,
        },
    },
    "eval": {
        "dataset": None,
        "splits": None,
        "checkpoint": None,
        "split": None,
        "average": None,
        "dump_predictions": None,
        "dump_probabilities": None,
        "config_label": None,
    },
    "report": {"grid": None},
}


def validate_keys(config: dict, schema: dict, prefix: str = "") -> None:
    for key, value in config.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise UsageError(f"unknown config key {path!r}")
        sub = schema[key]
        if isinstance(sub, dict) and isinstance(value, dict):
            validate_keys(value, sub, prefix=f"{path}.")
        elif isinstance(sub, dict) and value is not None:
            raise UsageError(f"config key {path!r} must be an object")


def apply_override(config: dict, schema: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node, snode = config, schema
    for key in keys[:-1]:
        if key not in snode:
            raise UsageError(f"unknown config key {dotted!r}")
        snode = snode[key]
        if not isinstance(snode, dict):
            raise UsageError(f"config key {dotted!r} does not nest")
        node = node.setdefault(key, {})
    if keys[-1] not in snode:
        raise UsageError(f"unknown config key {dotted!r}")
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def load_config(path: str | None, schema: dict, overrides: list[str]) -> tuple[dict, Path]:
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise UsageError(f"config file not found: {cfg_path}")
        config = json.loads(cfg_path.read_text())
        base = cfg_path.parent
    else:
        config, base = {}, Path.cwd()
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        apply_override(config, schema, key, raw)
    validate_keys(config, schema)
    return config, base


def resolve(base: Path, value: str, dataset: bool = False) -> Path:
    p = Path(value)
    if p.is_absolute():
        return p
    root = os.environ.get("HIERCROP_DATA_ROOT")
    if dataset and root:
        return Path(root) / p
    return base / p


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {out_dir} is locked by another writer ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _synth_config(config: dict, base: Path) -> tuple[SynthConfig, int, int]:
    dims = config.get("dims", {})
    if config.get("taxonomy"):
        tree = taxonomy.load_taxonomy(require(resolve(base, config["taxonomy"]), "taxonomy file"))
    else:
        tree = taxonomy.bundled_taxonomy()
    signals = config.get("signals", {})
    cfg = SynthConfig(
        tree=tree,
        hsi_bands=dims.get("hsi_bands", 218),
        hsi_size=tuple(dims.get("hsi_size", (64, 64))),
        months=dims.get("months", 12),
        msi_bands=dims.get("msi_bands", 10),
        image_size=tuple(dims.get("image_size", (192, 192))),
        parcels_per_image=tuple(config.get("parcels_per_image", (6, 12))),
        parcel_cells=tuple(config.get("parcel_cells", (3, 10))),
        change_fraction=config.get("change_fraction", 0.0),
        hsi_noise=config.get("hsi_noise", 0.02),
        msi_noise=config.get("msi_noise", 0.02),
        parcel_gain_jitter=config.get("parcel_gain_jitter", 0.05),
        class_signals=build_class_signals(tree, **signals) if signals else {},
        seed=config.get("seed", 0),
    )
    return cfg, config.get("count", 16), config.get("label_check_min_parcels", 1)


def cmd_synth(args) -> int:
    config, base = load_config(args.config, SCHEMAS["synth"], args.set)
    cfg, count, min_parcels = _synth_config(config, base)
    cfg.validate()
    out = Path(args.out)
    with output_lock(out):
        samples = generate_dataset(cfg, count)
        tree = cfg.tree
        if min_parcels > 1:
            samples, tree = label_check(samples, tree, min_parcels)
            if not samples:
                raise RuntimeError("label check removed every sample")
        hashable = dict(config)
        hashable.pop("taxonomy", None)
        dataset_io.write_dataset(
            out, samples, tree, {"config_hash": dataset_io.config_hash(hashable)}
        )
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_split(args) -> int:
    config, base = load_config(args.config, SCHEMAS["split"], args.set)
    if "dataset" not in config:
        raise UsageError("split config needs a 'dataset' path")
    root = require(resolve(base, config["dataset"], dataset=True), "dataset")
    sigs = dataset_io.read_signatures(root)
    ids = sorted(sigs)
    assignment = frequency_aware_split(
        ids,
        [sigs[i] for i in ids],
        ratios=tuple(config.get("ratios", (0.6, 0.2, 0.2))),
        seed=config.get("seed", 0),
    )
    out = Path(args.out)
    with output_lock(out):
        assignment.save(out / "splits.json")
    print(
        f"split {len(ids)} samples into {len(assignment.train)}/{len(assignment.val)}"
        f"/{len(assignment.test)}; {len(assignment.train_only_classes)} train-only classes"
    )
    return 0


def _run_config(config: dict) -> RunConfig:
    run = config.get("run", {})
    modality = ModalityConfig(**run.get("modality", {}))
    scale = ModelScale(
        **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in run.get("scale", {}).items()
        }
    )
    schedule = ScheduleConfig(**run.get("schedule", {}))
    simple = {
        k: run[k]
        for k in (
            "months_used",
            "batch_size",
            "epochs",
            "seed",
            "weight_decay",
            "augment",
            "crop_size",
            "average",
            "deterministic",
        )
        if k in run
    }
    return RunConfig(modality=modality, scale=scale, schedule=schedule, **simple)


def cmd_train(args) -> int:
    config, base = load_config(args.config, SCHEMAS["train"], args.set)
    for key in ("dataset", "splits"):
        if key not in config:
            raise UsageError(f"train config needs a {key!r} path")
    root = require(resolve(base, config["dataset"], dataset=True), "dataset")
    splits = SplitAssignment.load(require(resolve(base, config["splits"]), "splits file"))
    run = _run_config(config)
    out = Path(args.out)
    with output_lock(out):
        if config.get("grid"):
            payload = run_ablation_grid(run, config["grid"], root, splits, out)
            ok = sum("error" not in c for c in payload["cells"])
            print(f"grid finished: {ok}/{len(payload['cells'])} cells succeeded")
        else:
            result = train(run, root, splits, out)
            print(
                f"trained {run.label()}: best val F1 {result.best_f1:.4f} "
                f"at epoch {result.best_epoch}"
            )
    return 0


def cmd_eval(args) -> int:
    config, base = load_config(args.config, SCHEMAS["eval"], args.set)
    for key in ("dataset", "splits", "checkpoint"):
        if key not in config:
            raise UsageError(f"eval config needs a {key!r} path")
    root = require(resolve(base, config["dataset"], dataset=True), "dataset")
    splits = SplitAssignment.load(require(resolve(base, config["splits"]), "splits file"))
    ckpt = require(resolve(base, config["checkpoint"]), "checkpoint")
    which = config.get("split", "test")
    if which not in ("train", "val", "test"):
        raise UsageError(f"split must be train/val/test (got {which!r})")
    out = Path(args.out)
    with output_lock(out):
        tables = evaluate_checkpoint(
            ckpt,
            root,
            getattr(splits, which),
            out_dir=out,
            average=config.get("average", "macro"),
            dump_predictions=config.get("dump_predictions", False),
            dump_probabilities=config.get("dump_probabilities", False),
            config_label=config.get("config_label", ""),
        )
    for name, table in tables.items():
        print(f"{which}/{name}: mean F1 {table.mean_f1:.4f}")
    return 0


def cmd_report(args) -> int:
    config, base = load_config(args.config, SCHEMAS["report"], args.set)
    if "grid" not in config:
        raise UsageError("report config needs a 'grid' path")
    grid_path = resolve(base, config["grid"])
    if grid_path.is_dir():
        grid_path = grid_path / "grid.json"
    require(grid_path, "grid results")
    payload = json.loads(grid_path.read_text())
    out = Path(args.out)
    with output_lock(out):
        write_grid_report(payload, out)
    print(f"report written to {out}")
    return 0


def write_grid_report(payload: dict, out: Path) -> None:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells = [c for c in payload["cells"] if "error" not in c]
    deltas = payload.get("deltas", [])
    with open(out / "cells.csv", "w", newline="") as fh:
        if cells:
            writer = csv.DictWriter(fh, fieldnames=sorted({k for c in cells for k in c}))
            writer.writeheader()
            writer.writerows(cells)
    with open(out / "deltas.csv", "w", newline="") as fh:
        if deltas:
            writer = csv.DictWriter(fh, fieldnames=sorted({k for d in deltas for k in d}))
            writer.writeheader()
            writer.writerows(deltas)

    # mean F1 against the temporal window, one line per configuration
    if any("months_used" in c for c in cells):
        fig, ax = plt.subplots(figsize=(6, 4))
        configs = sorted({c["config"] for c in cells})
        for name in configs:
            pts = sorted(
                (c["months_used"], c["all_f1_mean"])
                for c in cells
                if c["config"] == name and "months_used" in c
            )
            if pts:
                ax.plot(*zip(*pts), marker="o", label=name)
        ax.set_xlabel("months used")
        ax.set_ylabel("mean F1")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "f1_vs_months.png", dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(cells))
    for i, c in enumerate(cells):
        ys = [c.get(f"all_f1_level{k}", 0.0) for k in range(1, 5)]
        ax.bar([k + i * width for k in range(1, 5)], ys, width=width, label=c["cell"])
    ax.set_xticks([k + 0.4 for k in range(1, 5)])
    ax.set_xticklabels([f"level {k}" for k in range(1, 5)])
    ax.set_ylabel("F1")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "level_f1_bars.png", dpi=120)
    plt.close(fig)


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiercrop",
        description="Synthesize, split, train, evaluate, and report on "
        "dual-stream hierarchical crop classification runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted-path config override (repeatable)",
        )
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
