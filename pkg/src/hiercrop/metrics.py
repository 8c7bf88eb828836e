"""Per-level precision/recall/F1, stratified evaluation, and consistency.

Confusion counts are pixel-based per taxonomy level, with ground-truth
background excluded. Evaluation can be stratified into changed versus
unchanged pixels (did the crop differ from the prior year at level 4),
which partition the counted pixels exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .taxonomy import BACKGROUND, NUM_LEVELS, TaxonomyTree

AVERAGES = ("macro", "micro", "weighted")
STRATA = ("all", "changed", "unchanged")


@dataclass
class ConfusionCounts:
    """Per level, an [N_k, N_k] matrix: rows ground truth, columns prediction."""

    matrices: list[np.ndarray]

    @classmethod
    def zeros(cls, level_sizes: Sequence[int]) -> "ConfusionCounts":
        return cls([np.zeros((n, n), dtype=np.int64) for n in level_sizes])

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts([a + b for a, b in zip(self.matrices, other.matrices)])

    def total_pixels(self, level: int) -> int:
        return int(self.matrices[level - 1].sum())


def accumulate(
    pred: np.ndarray,
    gt: np.ndarray,
    level_sizes: Sequence[int],
    mask: Optional[np.ndarray] = None,
    into: Optional[ConfusionCounts] = None,
) -> ConfusionCounts:
    """Tally pixel counts over non-background ground truth (times ``mask``).

    ``pred`` and ``gt`` are [4, H, W] id rasters. Predictions at counted
    pixels must be valid foreground ids; the model never emits
    background, so a background prediction here is a caller bug.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
    counts = into if into is not None else ConfusionCounts.zeros(level_sizes)
    for k, n in enumerate(level_sizes):
        sel = gt[k] != BACKGROUND
        if mask is not None:
            sel = sel & mask
        p = pred[k][sel].astype(np.int64)
        g = gt[k][sel].astype(np.int64)
        if p.size and (p.min() < 1 or p.max() > n):
            raise ValueError(f"prediction ids outside 1..{n} at level {k + 1}")
        np.add.at(counts.matrices[k], (g - 1, p - 1), 1)
    return counts


@dataclass
class LevelMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    per_class: dict[int, tuple[float, float, float, int]] = field(default_factory=dict)


@dataclass
class MetricTable:
    levels: dict[int, LevelMetrics]
    average: str = "macro"
    stratum: str = "all"

    @property
    def mean_f1(self) -> float:
        return float(np.mean([m.f1 for m in self.levels.values()]))

    def rows(self, config: str = "") -> list[dict]:
        out = []
        for k, m in self.levels.items():
            for cid, (p, r, f1, sup) in sorted(m.per_class.items()):
                out.append(
                    {
                        "config": config,
                        "stratum": self.stratum,
                        "level": k,
                        "class": cid,
                        "precision": p,
                        "recall": r,
                        "f1": f1,
                        "support": sup,
                    }
                )
            out.append(
                {
                    "config": config,
                    "stratum": self.stratum,
                    "level": k,
                    "class": "aggregate",
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
            )
        out.append(
            {
                "config": config,
                "stratum": self.stratum,
                "level": "mean",
                "class": "aggregate",
                "precision": float(np.mean([m.precision for m in self.levels.values()])),
                "recall": float(np.mean([m.recall for m in self.levels.values()])),
                "f1": self.mean_f1,
                "support": sum(m.support for m in self.levels.values()),
            }
        )
        return out


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf1(counts: ConfusionCounts, average: str = "macro", stratum: str = "all") -> MetricTable:
    """Precision/recall/F1 per class and per level from confusion counts.

    Zero denominators yield 0. The level aggregate is over classes with
    at least one ground-truth pixel; "macro" averages their per-class
    metrics unweighted, "weighted" by support, and "micro" pools counts.
    """
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES} (got {average!r})")
    levels: dict[int, LevelMetrics] = {}
    for k, m in enumerate(counts.matrices, start=1):
        tp = np.diag(m).astype(np.float64)
        fp = m.sum(axis=0) - tp
        fn = m.sum(axis=1) - tp
        support = m.sum(axis=1)
        per_class = {}
        for c in range(m.shape[0]):
            p = _safe_div(tp[c], tp[c] + fp[c])
            r = _safe_div(tp[c], tp[c] + fn[c])
            f1 = _safe_div(2 * p * r, p + r)
            per_class[c + 1] = (p, r, f1, int(support[c]))
        present = support > 0
        if not present.any():
            levels[k] = LevelMetrics(0.0, 0.0, 0.0, 0, per_class)
            continue
        if average == "micro":
            p = _safe_div(tp[present].sum(), (tp + fp)[present].sum())
            r = _safe_div(tp[present].sum(), (tp + fn)[present].sum())
            agg = (p, r, _safe_div(2 * p * r, p + r))
        else:
            triples = np.array([per_class[c + 1][:3] for c in np.nonzero(present)[0]])
            if average == "macro":
                agg = tuple(triples.mean(axis=0))
            else:
                wts = support[present] / support[present].sum()
                agg = tuple((triples * wts[:, None]).sum(axis=0))
        levels[k] = LevelMetrics(
            float(agg[0]), float(agg[1]), float(agg[2]), int(support.sum()), per_class
        )
    return MetricTable(levels=levels, average=average, stratum=stratum)


def changed_mask(labels: np.ndarray, prior: np.ndarray, level: int = NUM_LEVELS) -> np.ndarray:
    """Pixels whose crop differs from the prior year (both labeled) at ``level``."""
    if labels.shape != prior.shape:
        raise ValueError(f"labels {labels.shape} does not match prior {prior.shape}")
    cur, old = labels[level - 1], prior[level - 1]
    return (cur != old) & (cur != BACKGROUND) & (old != BACKGROUND)


def hierarchy_consistency(
    pred: np.ndarray, tree: TaxonomyTree, mask: Optional[np.ndarray] = None
) -> float:
    """Fraction of labeled pixels whose predicted chain obeys the parent links.

    A pixel counts as consistent when parent_id(level k prediction)
    equals the level k-1 prediction for all k in 2..4. Pixels with all
    levels background are excluded; an empty selection returns 1.0.
    """
    labeled = (pred != BACKGROUND).any(axis=0)
    if mask is not None:
        labeled = labeled & mask
    if not labeled.any():
        return 1.0
    ok = np.ones(labeled.sum(), dtype=bool)
    for k in range(2, NUM_LEVELS + 1):
        table = tree.parent_array(k)
        child = pred[k - 1][labeled].astype(np.int64)
        ok &= table[child] == pred[k - 2][labeled]
    return float(ok.mean()) if ok.size else 1.0


def evaluate_stratified(
    sample_results: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]],
    level_sizes: Sequence[int],
    average: str = "macro",
) -> dict[str, MetricTable]:
    """Metric tables for the all/changed/unchanged strata.

    Takes (pred, gt, prior) triples per sample. "changed" means the
    level-4 label differs from the prior year at that pixel (both
    labeled); "unchanged" is its complement among counted pixels, so the
    two strata partition the "all" counts exactly.
    """
    pools = {name: ConfusionCounts.zeros(level_sizes) for name in STRATA}
    for pred, gt, prior in sample_results:
        ch = changed_mask(gt, prior)
        accumulate(pred, gt, level_sizes, into=pools["all"])
        accumulate(pred, gt, level_sizes, mask=ch, into=pools["changed"])
        accumulate(pred, gt, level_sizes, mask=~ch, into=pools["unchanged"])
    return {
        name: prf1(pools[name], average=average, stratum=name) for name in STRATA
    }


def write_report(
    rows: list[dict], csv_path: str | Path, json_path: Optional[str | Path] = None
) -> None:
    fields = ["config", "stratum", "level", "class", "precision", "recall", "f1", "support"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=1))
