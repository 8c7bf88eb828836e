"""Frequency-aware train/validation/test partitioning.

Rare crops cluster spatially, so naive random splits can leave a class
absent from validation or test. The splitter keys each image by its
*signature crop* (the least frequent level-4 class it contains), groups
images by signature, and deals each group into the three splits at the
target cadence, rarest signatures first.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .taxonomy import BACKGROUND, NUM_LEVELS

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


def signature_crop(labels: np.ndarray) -> int:
    """Least frequent level-4 class in one image; ties go to the smallest id."""
    level4 = labels[NUM_LEVELS - 1] if labels.ndim == 3 else labels
    ids, counts = np.unique(level4[level4 != BACKGROUND], return_counts=True)
    if ids.size == 0:
        raise ValueError("cannot take the signature crop of an all-background image")
    return int(ids[np.argmin(counts)])  # argmin returns the first (smallest id) on ties


@dataclass
class SplitAssignment:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    presence: dict[int, dict[str, bool]] = field(default_factory=dict)
    train_only_classes: list[int] = field(default_factory=list)
    seed: int = 0

    def split_of(self, sample_id: str) -> str:
        for name in SPLITS:
            if sample_id in set(getattr(self, name)):
                return name
        raise KeyError(sample_id)

    def save(self, path: str | Path) -> None:
        payload = {
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "train_only_classes": self.train_only_classes,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SplitAssignment":
        payload = json.loads(Path(path).read_text())
        return cls(
            train=payload["train"],
            val=payload["val"],
            test=payload["test"],
            train_only_classes=payload.get("train_only_classes", []),
            seed=payload.get("seed", 0),
        )


def _cadence(ratios: tuple[float, float, float]) -> list[int]:
    """Smallest repeating assignment pattern realizing the ratios.

    The pattern leads with one of each split so that 3-sample groups
    already touch train, val and test, then fills the remainder.
    """
    counts = [max(1, round(r * 10)) for r in ratios]
    from math import gcd

    g = gcd(gcd(counts[0], counts[1]), counts[2])
    counts = [c // g for c in counts]
    pattern = [0, 1, 2]
    remaining = [c - 1 for c in counts]
    for s, n in enumerate(remaining):
        pattern.extend([s] * n)
    return pattern


def frequency_aware_split(
    sample_ids: Sequence[str],
    signatures: Sequence[int],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Deal samples into train/val/test, rarest signature classes first.

    Groups with fewer than 3 samples cannot appear in every split; they
    go entirely to train and the class is flagged as train-only.
    """
    if len(sample_ids) == 0:
        raise ValueError("cannot split an empty dataset")
    if len(sample_ids) != len(signatures):
        raise ValueError("sample_ids and signatures must align")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1 (got {ratios})")

    groups: dict[int, list[str]] = {}
    for sid, sig in zip(sample_ids, signatures):
        groups.setdefault(int(sig), []).append(sid)

    rng = np.random.default_rng(seed)
    out: dict[str, list[str]] = {name: [] for name in SPLITS}
    presence: dict[int, dict[str, bool]] = {}
    train_only: list[int] = []
    pattern = _cadence(ratios)

    # ascending dataset-wide signature frequency; class id breaks ties
    for sig in sorted(groups, key=lambda c: (len(groups[c]), c)):
        members = sorted(groups[sig])
        rng.shuffle(members)
        if len(members) < 3:
            out["train"].extend(members)
            presence[sig] = {"train": True, "val": False, "test": False}
            train_only.append(sig)
            logger.warning(
                "signature class %d has only %d sample(s); assigned entirely to train",
                sig,
                len(members),
            )
            continue
        marks = {name: False for name in SPLITS}
        for i, sid in enumerate(members):
            name = SPLITS[pattern[i % len(pattern)]]
            out[name].append(sid)
            marks[name] = True
        presence[sig] = marks

    return SplitAssignment(
        train=out["train"],
        val=out["val"],
        test=out["test"],
        ratios=ratios,
        presence=presence,
        train_only_classes=sorted(train_only),
        seed=seed,
    )


def check_footprint_overlap(
    footprints: Optional[Mapping[str, tuple[float, float, float, float]]],
) -> list[tuple[str, str]]:
    """Spatial-independence hook: report overlapping sample footprints.

    Takes ``{sample_id: (xmin, ymin, xmax, ymax)}``. Synthetic scenes
    have no shared geography, so callers usually pass nothing and get
    an empty report; real-data pipelines can plug actual footprints in
    before splitting.
    """
    if not footprints:
        return []
    items = sorted(footprints.items())
    clashes = []
    for i, (id_a, a) in enumerate(items):
        for id_b, b in items[i + 1 :]:
            if a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                clashes.append((id_a, id_b))
    return clashes
