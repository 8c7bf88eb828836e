"""Synthetic scene generator for the dual-modality crop classifier.

Each sample couples a single-date hyperspectral cube at coarse resolution
with a monthly multispectral series at fine resolution, plus hierarchical
label/prior rasters. Scenes are tilings of axis-aligned rectangular
parcels snapped to the coarse grid, so every hyperspectral pixel covers
exactly one crop.

Per level-4 class the renderer draws from two independent "archetypes":

* a spectral archetype, a smooth curve over hyperspectral band index,
  which is the only class signal in the hyperspectral cube;
* a temporal archetype, a phenology curve over the monthly axis, which
  is the only class signal in the multispectral series.

Classes that share a temporal archetype are therefore indistinguishable
from the time series alone, and classes sharing a spectral archetype are
indistinguishable from the cube alone. Tests use this to verify that
each encoder contributes what it should.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .splitting import signature_crop
from .taxonomy import NUM_LEVELS, TaxonomyTree, build_tree, stack_is_consistent

_GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class Parcel:
    """One rectangular field, in coarse-grid cells."""

    box: tuple[int, int, int, int]  # y0, x0, height, width
    class4: int
    prior4: int

    @property
    def changed(self) -> bool:
        return self.class4 != self.prior4


@dataclass
class Sample:
    hsi: np.ndarray  # [C', H', W'] float32 in [0, 1]
    msi: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [4, H, W] uint16
    prior: np.ndarray  # [4, H, W] uint16
    sample_id: str
    signature: int  # least frequent level-4 id in this image
    parcels: tuple[Parcel, ...] = ()

    @property
    def ratio(self) -> int:
        return self.labels.shape[1] // self.hsi.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    tree: TaxonomyTree
    hsi_bands: int = 218
    hsi_size: tuple[int, int] = (64, 64)
    months: int = 12
    msi_bands: int = 10
    image_size: tuple[int, int] = (192, 192)
    parcels_per_image: tuple[int, int] = (6, 12)
    parcel_cells: tuple[int, int] = (3, 10)  # side length range, coarse cells
    change_fraction: float = 0.0
    hsi_noise: float = 0.02
    msi_noise: float = 0.02
    parcel_gain_jitter: float = 0.05
    class_signals: Mapping[int, tuple[int, int]] = field(default_factory=dict)
    seed: int = 0

    @property
    def ratio(self) -> int:
        r = self.image_size[0] // self.hsi_size[0]
        return r

    def validate(self) -> None:
        r = self.ratio
        if r < 1 or self.image_size != (self.hsi_size[0] * r, self.hsi_size[1] * r):
            raise ValueError(
                f"image size {self.image_size} is not an integer multiple of "
                f"hyperspectral size {self.hsi_size}"
            )
        if not 0.0 <= self.change_fraction <= 1.0:
            raise ValueError(f"change fraction must be in [0, 1] (got {self.change_fraction})")
        if self.tree.num_classes(NUM_LEVELS) == 0:
            raise ValueError("taxonomy has no level-4 classes to draw parcels from")

    def signal_for(self, class4: int) -> tuple[int, int]:
        return self.class_signals.get(class4, (class4, class4))


def build_class_signals(
    tree: TaxonomyTree,
    spectral_only_pairs: int = 0,
    temporal_only_pairs: int = 0,
    cross_twins: int = 0,
) -> dict[int, tuple[int, int]]:
    """Assign (spectral, temporal) archetypes realizing a pair structure.

    ``spectral_only_pairs`` level-4 sibling pairs share their temporal
    archetype (hyperspectral data is then the only way to tell them
    apart); ``temporal_only_pairs`` sibling pairs share their spectral
    archetype; ``cross_twins`` pairs of classes from different level-3
    parents share both archetypes (fully ambiguous). All remaining
    classes keep distinct archetypes.
    """
    n4 = tree.num_classes(NUM_LEVELS)
    signals = {c: (c, c) for c in range(1, n4 + 1)}
    by_parent: dict[int, list[int]] = {}
    for c in range(1, n4 + 1):
        by_parent.setdefault(tree.parent_id(NUM_LEVELS, c), []).append(c)
    sib_pairs = [ids[:2] for _, ids in sorted(by_parent.items()) if len(ids) >= 2]
    need = spectral_only_pairs + temporal_only_pairs
    if len(sib_pairs) < need:
        raise ValueError(f"taxonomy offers {len(sib_pairs)} sibling pairs, {need} requested")
    for a, b in sib_pairs[:spectral_only_pairs]:
        signals[b] = (signals[b][0], signals[a][1])  # shared phenology
    for a, b in sib_pairs[spectral_only_pairs:need]:
        signals[b] = (signals[a][0], signals[b][1])  # shared spectrum
    paired = {c for pair in sib_pairs[:need] for c in pair}
    free = [c for c in range(1, n4 + 1) if c not in paired]
    twins = 0
    for i, a in enumerate(free):
        if twins == cross_twins:
            break
        for b in free[i + 1 :]:
            if b in paired or tree.parent_id(NUM_LEVELS, b) == tree.parent_id(NUM_LEVELS, a):
                continue
            signals[b] = signals[a]
            paired.update((a, b))
            twins += 1
            break
    if twins < cross_twins:
        raise ValueError(f"could not form {cross_twins} cross-parent twins")
    return signals


def _spectral_curve(seed: int, archetype: int, bands: int) -> np.ndarray:
    """Smooth reflectance offset over band index: a few localized bumps."""
    rng = np.random.default_rng([seed, 7001, archetype])
    x = np.arange(bands, dtype=np.float64)
    curve = np.zeros(bands)
    for i in range(3):
        center = (((archetype * _GOLDEN) + i / 3.0) % 1.0) * bands
        width = rng.uniform(bands / 30.0, bands / 10.0)
        amp = rng.uniform(0.12, 0.3)
        curve += amp * np.exp(-0.5 * ((x - center) / width) ** 2)
    return curve


def _temporal_curve(seed: int, archetype: int, months: int) -> np.ndarray:
    """Phenology profile over the monthly axis: two growth pulses."""
    rng = np.random.default_rng([seed, 7002, archetype])
    t = np.arange(months, dtype=np.float64)
    peak1 = ((archetype * _GOLDEN) % 1.0) * (months - 1)
    peak2 = (peak1 + months / 2.0) % months
    w1, w2 = rng.uniform(0.7, 1.5, size=2)
    a1 = rng.uniform(0.55, 0.85)
    a2 = rng.uniform(0.1, 0.45)
    return a1 * np.exp(-0.5 * ((t - peak1) / w1) ** 2) + a2 * np.exp(
        -0.5 * ((t - peak2) / w2) ** 2
    )


def _band_response(seed: int, bands: int) -> np.ndarray:
    """Fixed per-band weight of the phenology pulse (shared by all classes)."""
    rng = np.random.default_rng([seed, 7003])
    return rng.uniform(0.3, 1.0, size=bands) * rng.choice([-1.0, 1.0], size=bands)


def _paint_parcels(
    rng: np.random.Generator, cfg: SynthConfig
) -> tuple[np.ndarray, list[Parcel]]:
    """Lay rectangles onto the coarse grid; later parcels overwrite earlier."""
    hc, wc = cfg.hsi_size
    grid = np.full((hc, wc), -1, dtype=np.int32)  # parcel index per cell
    lo, hi = cfg.parcels_per_image
    n = int(rng.integers(lo, hi + 1))
    n4 = cfg.tree.num_classes(NUM_LEVELS)
    boxes: list[tuple[int, int, int, int]] = []
    classes: list[int] = []
    for i in range(n):
        ph = int(rng.integers(cfg.parcel_cells[0], cfg.parcel_cells[1] + 1))
        pw = int(rng.integers(cfg.parcel_cells[0], cfg.parcel_cells[1] + 1))
        ph, pw = min(ph, hc), min(pw, wc)
        y0 = int(rng.integers(0, hc - ph + 1))
        x0 = int(rng.integers(0, wc - pw + 1))
        grid[y0 : y0 + ph, x0 : x0 + pw] = i
        boxes.append((y0, x0, ph, pw))
        classes.append(int(rng.integers(1, n4 + 1)))

    visible = [i for i in range(n) if np.any(grid == i)]

    # prior-year classes: flip a fixed share of the visible parcels
    priors = list(classes)
    k = int(round(cfg.change_fraction * len(visible)))
    if k > 0 and n4 > 1:
        for i in rng.choice(len(visible), size=k, replace=False):
            idx = visible[int(i)]
            other = int(rng.integers(1, n4))
            priors[idx] = other if other < classes[idx] else other + 1

    # compact parcel indices to the visible ones
    parcels = []
    remap = np.full(n + 1, -1, dtype=np.int32)
    for new_i, old_i in enumerate(visible):
        remap[old_i] = new_i
        parcels.append(Parcel(box=boxes[old_i], class4=classes[old_i], prior4=priors[old_i]))
    grid = np.where(grid >= 0, remap[grid], -1)
    return grid, parcels


def _stack_from_grid(
    grid4: np.ndarray, tree: TaxonomyTree, ratio: int
) -> np.ndarray:
    """Expand a coarse level-4 id grid into a fine [4, H, W] stack."""
    ancestry = np.zeros((NUM_LEVELS, tree.num_classes(NUM_LEVELS) + 1), dtype=np.uint16)
    for c in range(1, tree.num_classes(NUM_LEVELS) + 1):
        ancestry[:, c] = tree.leaf_ancestry(c)
    fine4 = np.kron(grid4, np.ones((ratio, ratio), dtype=grid4.dtype))
    return ancestry[:, fine4]


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    """Render a single scene; a pure function of (cfg.seed, index)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    hc, wc = cfg.hsi_size
    h, w = cfg.image_size
    r = cfg.ratio

    grid, parcels = _paint_parcels(rng, cfg)
    cls_grid = np.zeros((hc, wc), dtype=np.uint16)
    prior_grid = np.zeros((hc, wc), dtype=np.uint16)
    gain_grid = np.ones((hc, wc), dtype=np.float64)
    for i, p in enumerate(parcels):
        cell = grid == i
        cls_grid[cell] = p.class4
        prior_grid[cell] = p.prior4
        gain_grid[cell] = 1.0 + rng.normal(0.0, cfg.parcel_gain_jitter)

    labels = _stack_from_grid(cls_grid, cfg.tree, r)
    prior = _stack_from_grid(prior_grid, cfg.tree, r)

    # hyperspectral cube: per-class spectral curve on a flat soil baseline
    spec_lut = np.zeros((cfg.tree.num_classes(NUM_LEVELS) + 1, cfg.hsi_bands))
    for c in range(1, spec_lut.shape[0]):
        arch, _ = cfg.signal_for(c)
        spec_lut[c] = _spectral_curve(cfg.seed, arch, cfg.hsi_bands)
    base_h = 0.18 + 0.04 * np.sin(np.arange(cfg.hsi_bands) / cfg.hsi_bands * np.pi)
    hsi = base_h[:, None, None] + spec_lut[cls_grid].transpose(2, 0, 1) * gain_grid
    hsi = hsi + rng.normal(0.0, cfg.hsi_noise, size=hsi.shape)

    # multispectral series: phenology pulse weighted by a fixed band response
    temp_lut = np.zeros((cfg.tree.num_classes(NUM_LEVELS) + 1, cfg.months))
    for c in range(1, temp_lut.shape[0]):
        _, arch = cfg.signal_for(c)
        temp_lut[c] = _temporal_curve(cfg.seed, arch, cfg.months)
    response = _band_response(cfg.seed, cfg.msi_bands)
    pheno = temp_lut[cls_grid] * gain_grid[..., None]  # [hc, wc, T]
    pheno_fine = np.kron(pheno, np.ones((r, r, 1)))  # [h, w, T]
    msi = 0.3 + 0.3 * np.einsum("hwt,c->tchw", pheno_fine, response)
    msi = msi + rng.normal(0.0, cfg.msi_noise, size=msi.shape)

    labels_u16 = labels.astype(np.uint16)
    return Sample(
        hsi=np.clip(hsi, 0.0, 1.0).astype(np.float32),
        msi=np.clip(msi, 0.0, 1.0).astype(np.float32),
        labels=labels_u16,
        prior=prior.astype(np.uint16),
        sample_id=f"sample-{index:05d}",
        signature=signature_crop(labels_u16) if np.any(labels_u16[NUM_LEVELS - 1]) else 0,
        parcels=tuple(parcels),
    )


def generate_dataset(cfg: SynthConfig, count: int) -> list[Sample]:
    return [generate_sample(cfg, i) for i in range(count)]


# ---------------------------------------------------------------------------
# label check


def label_check(
    samples: Sequence[Sample], tree: TaxonomyTree, min_parcels: int
) -> tuple[list[Sample], TaxonomyTree]:
    """Drop classes with too few parcels and recompact ids.

    A class below the threshold is relabeled to background at its own
    level (ancestors keep their labels); descendants follow it into the
    background. Samples left without any crop annotation are dropped,
    and a fresh tree is built over the surviving codes.
    """
    if min_parcels < 1:
        raise ValueError(f"min_parcels must be >= 1 (got {min_parcels})")

    counts = [np.zeros(tree.num_classes(k) + 1, dtype=np.int64) for k in range(1, 5)]
    for s in samples:
        for p in s.parcels:
            for k, cid in enumerate(tree.leaf_ancestry(p.class4), start=1):
                counts[k - 1][cid] += 1

    keep: list[np.ndarray] = []  # keep[k-1][id] -> survives at level k
    for k in range(1, NUM_LEVELS + 1):
        ok = counts[k - 1] >= min_parcels
        ok[0] = False
        if k > 1:
            ok &= keep[k - 2][tree.parent_array(k)]  # removed parent removes the child
        keep.append(ok)

    surviving = [c for k in range(1, 5) for i, c in enumerate(tree.level_codes[k - 1]) if keep[k - 1][i + 1]]
    if not surviving:
        return [], tree
    new_tree = build_tree(surviving, tree.names)

    remap = []
    for k in range(1, NUM_LEVELS + 1):
        table = np.zeros(tree.num_classes(k) + 1, dtype=np.uint16)
        for i, code in enumerate(tree.level_codes[k - 1]):
            if keep[k - 1][i + 1]:
                table[i + 1] = new_tree.id_of(code, k)
        remap.append(table)

    out: list[Sample] = []
    for s in samples:
        labels = np.stack([remap[k][s.labels[k]] for k in range(NUM_LEVELS)])
        prior = np.stack([remap[k][s.prior[k]] for k in range(NUM_LEVELS)])
        if not np.any(labels):
            continue
        parcels = tuple(
            Parcel(box=p.box, class4=int(remap[3][p.class4]), prior4=int(remap[3][p.prior4]))
            for p in s.parcels
        )
        sig = signature_crop(labels) if np.any(labels[NUM_LEVELS - 1]) else 0
        out.append(replace(s, labels=labels, prior=prior, parcels=parcels, signature=sig))
    return out, new_tree


# ---------------------------------------------------------------------------
# augmentation


def _flip_box(box, size, axis_is_x):
    y0, x0, h, w = box
    if axis_is_x:
        return (y0, size - x0 - w, h, w)
    return (size - y0 - h, x0, h, w)


def hflip(sample: Sample) -> Sample:
    wc = sample.hsi.shape[2]
    return replace(
        sample,
        hsi=sample.hsi[:, :, ::-1].copy(),
        msi=sample.msi[:, :, :, ::-1].copy(),
        labels=sample.labels[:, :, ::-1].copy(),
        prior=sample.prior[:, :, ::-1].copy(),
        parcels=tuple(replace(p, box=_flip_box(p.box, wc, True)) for p in sample.parcels),
    )


def vflip(sample: Sample) -> Sample:
    hc = sample.hsi.shape[1]
    return replace(
        sample,
        hsi=sample.hsi[:, ::-1].copy(),
        msi=sample.msi[:, :, ::-1].copy(),
        labels=sample.labels[:, ::-1].copy(),
        prior=sample.prior[:, ::-1].copy(),
        parcels=tuple(replace(p, box=_flip_box(p.box, hc, False)) for p in sample.parcels),
    )


def rot90(sample: Sample, k: int = 1) -> Sample:
    """Rotate by k quarter turns counterclockwise; square grids only."""
    if sample.hsi.shape[1] != sample.hsi.shape[2]:
        raise ValueError("rot90 requires square scenes")
    k = k % 4
    if k == 0:
        return replace(sample)
    side = sample.hsi.shape[1]

    def rot_box(box):
        y0, x0, h, w = box
        for _ in range(k):
            y0, x0, h, w = side - x0 - w, y0, w, h
        return (y0, x0, h, w)

    return replace(
        sample,
        hsi=np.rot90(sample.hsi, k, axes=(1, 2)).copy(),
        msi=np.rot90(sample.msi, k, axes=(2, 3)).copy(),
        labels=np.rot90(sample.labels, k, axes=(1, 2)).copy(),
        prior=np.rot90(sample.prior, k, axes=(1, 2)).copy(),
        parcels=tuple(replace(p, box=rot_box(p.box)) for p in sample.parcels),
    )


def cutmix(sample: Sample, partner: Sample, box: tuple[int, int, int, int]) -> Sample:
    """Paste the partner's box region into all rasters of ``sample``.

    ``box`` = (y0, x0, height, width) in fine-grid pixels; every entry
    must be a multiple of the resolution ratio so the hyperspectral cube
    stays co-registered. Parcel metadata does not survive the paste.
    """
    if sample.hsi.shape != partner.hsi.shape or sample.msi.shape != partner.msi.shape:
        raise ValueError("cutmix partner must have identical dimensions")
    r = sample.ratio
    y0, x0, bh, bw = box
    if any(v % r for v in box):
        raise ValueError(f"cutmix box {box} is not aligned to the {r}-pixel coarse grid")
    h, w = sample.labels.shape[1:]
    if y0 < 0 or x0 < 0 or y0 + bh > h or x0 + bw > w:
        raise ValueError(f"cutmix box {box} out of bounds for {h}x{w}")
    fine = (slice(y0, y0 + bh), slice(x0, x0 + bw))
    coarse = (slice(y0 // r, (y0 + bh) // r), slice(x0 // r, (x0 + bw) // r))
    hsi, msi = sample.hsi.copy(), sample.msi.copy()
    labels, prior = sample.labels.copy(), sample.prior.copy()
    hsi[:, coarse[0], coarse[1]] = partner.hsi[:, coarse[0], coarse[1]]
    msi[:, :, fine[0], fine[1]] = partner.msi[:, :, fine[0], fine[1]]
    labels[:, fine[0], fine[1]] = partner.labels[:, fine[0], fine[1]]
    prior[:, fine[0], fine[1]] = partner.prior[:, fine[0], fine[1]]
    sig = signature_crop(labels) if np.any(labels[NUM_LEVELS - 1]) else 0
    return replace(
        sample, hsi=hsi, msi=msi, labels=labels, prior=prior, parcels=(), signature=sig
    )


def random_augment(
    sample: Sample,
    rng: np.random.Generator,
    partner: Optional[Sample] = None,
    *,
    p_flip: float = 0.5,
    p_rot: float = 0.5,
    p_cutmix: float = 0.5,
    cutmix_frac: tuple[float, float] = (0.25, 0.5),
) -> Sample:
    """Training-time augmentation: flips, quarter rotations, region paste."""
    if rng.random() < p_flip:
        sample = hflip(sample)
    if rng.random() < p_flip:
        sample = vflip(sample)
    if rng.random() < p_rot:
        sample = rot90(sample, int(rng.integers(1, 4)))
    if partner is not None and rng.random() < p_cutmix:
        r = sample.ratio
        h, w = sample.labels.shape[1:]
        bh = int(rng.uniform(*cutmix_frac) * h) // r * r
        bw = int(rng.uniform(*cutmix_frac) * w) // r * r
        if bh and bw:
            y0 = int(rng.integers(0, (h - bh) // r + 1)) * r
            x0 = int(rng.integers(0, (w - bw) // r + 1)) * r
            sample = cutmix(sample, partner, (y0, x0, bh, bw))
    return sample


def check_sample(sample: Sample, tree: TaxonomyTree) -> None:
    """Raise if a sample violates the hierarchy or value contracts."""
    if not stack_is_consistent(sample.labels, tree):
        raise ValueError(f"{sample.sample_id}: labels break the taxonomy hierarchy")
    if not stack_is_consistent(sample.prior, tree):
        raise ValueError(f"{sample.sample_id}: prior labels break the taxonomy hierarchy")
    for name, arr in (("hsi", sample.hsi), ("msi", sample.msi)):
        if not np.isfinite(arr).all():
            raise ValueError(f"{sample.sample_id}: non-finite {name} values")
