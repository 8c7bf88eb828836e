"""Four-tier hierarchical crop code scheme and class-id bookkeeping.

Crop types are keyed by 10-digit codes rendered as five 2-digit groups,
e.g. ``33-01-01-01-01``. The leading group is the fixed scheme prefix
``33``; each following group refines the classification by one level
(level 1 coarsest, level 4 finest). A group of ``00`` terminates the
path: ``33-01-01-00-00`` is a level-2 code.

:class:`TaxonomyTree` maps retained codes at each level to contiguous
ids ``1..N_k``; id 0 is reserved for background/unlabeled pixels at
every level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

PREFIX = "33"
NUM_LEVELS = 4
BACKGROUND = 0


def _groups(raw: str) -> list[str]:
    return [raw[i : i + 2] for i in range(0, 10, 2)]


def canonical(code: str) -> str:
    """Hyphen-grouped display form of a raw 10-digit code."""
    raw = code.replace("-", "")
    return "-".join(_groups(raw))


def ancestor_code(raw: str, level: int) -> str:
    """Ancestor of ``raw`` at ``level``: keep the first ``level`` groups after the prefix."""
    g = _groups(raw)
    return "".join(g[: level + 1]) + "00" * (NUM_LEVELS - level)


@dataclass(frozen=True)
class HierPath:
    """Ancestor chain of one code, coarsest first.

    ``levels[k-1]`` is the raw 10-digit ancestor code at taxonomy level k.
    """

    levels: tuple[str, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def leaf(self) -> str:
        return self.levels[-1]

    def format(self) -> str:
        return canonical(self.leaf)


def parse_code(text: str) -> HierPath:
    """Parse a crop code into its ancestor path.

    Accepts the raw 10-digit form or the hyphen-grouped form. Raises
    ``ValueError`` on malformed input, a wrong prefix, or a non-``00``
    group appearing after a ``00`` group.
    """
    raw = text.replace("-", "")
    if len(raw) != 10 or not raw.isdigit():
        raise ValueError(f"crop code must be 10 digits (got {text!r})")
    groups = _groups(raw)
    if groups[0] != PREFIX:
        raise ValueError(f"crop code must start with {PREFIX!r} (got {text!r})")
    depth = 0
    for g in groups[1:]:
        if g == "00":
            break
        depth += 1
    for g in groups[1 + depth :]:
        if g != "00":
            raise ValueError(f"non-zero group after a 00 group in {text!r}")
    if depth == 0:
        raise ValueError(f"crop code {text!r} carries no classification groups")
    return HierPath(tuple(ancestor_code(raw, k) for k in range(1, depth + 1)))


@dataclass(frozen=True)
class TaxonomyTree:
    """Immutable per-level id maps plus parent links.

    ``level_codes[k-1]`` holds the retained raw codes at level k in id
    order (id = index + 1). ``parents[k-1][i]`` is the level-(k-1) id of
    the level-k id ``i+1``; the level-1 entry is unused.
    """

    level_codes: tuple[tuple[str, ...], ...]
    parents: tuple[tuple[int, ...], ...]
    names: Mapping[str, str] = field(default_factory=dict)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.level_codes)

    def num_classes(self, level: int) -> int:
        self._check_level(level)
        return len(self.level_codes[level - 1])

    def id_of(self, code: str, level: int) -> int:
        self._check_level(level)
        raw = code.replace("-", "")
        try:
            return self.level_codes[level - 1].index(raw) + 1
        except ValueError:
            raise KeyError(f"code {canonical(raw)} not in taxonomy at level {level}") from None

    def code_of(self, level: int, class_id: int) -> str:
        self._check_level(level)
        if not 1 <= class_id <= self.num_classes(level):
            raise ValueError(f"class id {class_id} out of range at level {level}")
        return self.level_codes[level - 1][class_id - 1]

    def name_of(self, level: int, class_id: int) -> str:
        code = self.code_of(level, class_id)
        return self.names.get(code, canonical(code))

    def parent_id(self, level: int, class_id: int) -> int:
        """Level-(``level``-1) ancestor id of a level-``level`` id; 0 maps to 0."""
        if not 2 <= level <= NUM_LEVELS:
            raise ValueError(f"parent lookup needs level in 2..{NUM_LEVELS} (got {level})")
        if class_id == BACKGROUND:
            return BACKGROUND
        if not 1 <= class_id <= self.num_classes(level):
            raise ValueError(f"class id {class_id} out of range at level {level}")
        return self.parents[level - 1][class_id - 1]

    def parent_array(self, level: int) -> np.ndarray:
        """Vectorized parent table: index i holds parent_id(level, i), index 0 is 0."""
        if not 2 <= level <= NUM_LEVELS:
            raise ValueError(f"parent lookup needs level in 2..{NUM_LEVELS} (got {level})")
        return np.concatenate(([BACKGROUND], np.asarray(self.parents[level - 1], dtype=np.int64)))

    def leaf_ancestry(self, leaf_id: int) -> tuple[int, ...]:
        """Ids at levels 1..4 for a level-4 id, coarsest first."""
        ids = [leaf_id]
        for level in range(NUM_LEVELS, 1, -1):
            ids.append(self.parent_id(level, ids[-1]))
        return tuple(reversed(ids))

    @staticmethod
    def _check_level(level: int) -> None:
        if not 1 <= level <= NUM_LEVELS:
            raise ValueError(f"level must be in 1..{NUM_LEVELS} (got {level})")


def build_tree(codes: Iterable[str], names: Optional[Mapping[str, str]] = None) -> TaxonomyTree:
    """Index a code set into contiguous per-level ids.

    The set is closed under ancestors automatically. Ids are assigned by
    lexicographic code order per level, starting at 1, so the same code
    set always yields the same tree.
    """
    per_level: list[set[str]] = [set() for _ in range(NUM_LEVELS)]
    for code in codes:
        path = parse_code(code)
        for k, anc in enumerate(path.levels, start=1):
            per_level[k - 1].add(anc)
    if not per_level[0]:
        raise ValueError("cannot build a taxonomy from an empty code set")

    level_codes = tuple(tuple(sorted(s)) for s in per_level)
    id_maps = [{c: i + 1 for i, c in enumerate(lc)} for lc in level_codes]
    parents: list[tuple[int, ...]] = [()]
    for k in range(2, NUM_LEVELS + 1):
        parents.append(
            tuple(id_maps[k - 2][ancestor_code(c, k - 1)] for c in level_codes[k - 1])
        )
    clean_names = {c.replace("-", ""): n for c, n in (names or {}).items()}
    return TaxonomyTree(level_codes=level_codes, parents=tuple(parents), names=clean_names)


def stack_is_consistent(stack: np.ndarray, tree: TaxonomyTree) -> bool:
    """Whether a [4, H, W] label stack obeys the parent links everywhere.

    A non-background label at level k must have the pixel's level-(k-1)
    label as its parent; background may only sit above background.
    """
    if stack.shape[0] != NUM_LEVELS:
        raise ValueError(f"label stack must have {NUM_LEVELS} levels (got {stack.shape[0]})")
    for level in range(2, NUM_LEVELS + 1):
        table = tree.parent_array(level)
        child = stack[level - 1].astype(np.int64)
        if child.max(initial=0) >= len(table):
            return False
        mask = child != BACKGROUND
        if not np.array_equal(table[child][mask], stack[level - 2][mask]):
            return False
        # background above a labeled pixel is a gap
        if np.any((stack[level - 2] == BACKGROUND) & mask):
            return False
    return True


def load_taxonomy(path: str | Path) -> TaxonomyTree:
    """Build a tree from a ``taxonomy.json`` file ({"codes": [...], "names": {...}})."""
    payload = json.loads(Path(path).read_text())
    return build_tree(payload["codes"], payload.get("names"))


def save_taxonomy(tree: TaxonomyTree, path: str | Path) -> None:
    """Write a tree back out as taxonomy.json (deepest-level codes plus names)."""
    codes: list[str] = []
    deepest = max((k for k in range(1, NUM_LEVELS + 1) if tree.num_classes(k)), default=0)
    covered: set[str] = set()
    for level in range(deepest, 0, -1):
        for code in tree.level_codes[level - 1]:
            if code not in covered:
                codes.append(code)
                for k in range(1, level):
                    covered.add(ancestor_code(code, k))
    payload = {
        "codes": sorted(codes),
        "names": {c: tree.names[c] for c in sorted(tree.names)},
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def bundled_taxonomy() -> TaxonomyTree:
    """The representative 101-leaf taxonomy shipped with the package."""
    with resources.files("hiercrop.data").joinpath("taxonomy.json").open() as fh:
        payload = json.load(fh)
    return build_tree(payload["codes"], payload.get("names"))
