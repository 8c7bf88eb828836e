"""On-disk dataset layout.

::

    dataset/
      meta.json            dims, level sizes, resolution ratio, schema version
      taxonomy.json        codes + display names
      samples/<id>/
        hsi.bin            float32 little-endian, [C', H', W']
        msi.bin            float32 little-endian, [T, C, H, W]
        labels.bin         uint16 little-endian, [4, H, W]
        prior.bin          uint16 little-endian, [4, H, W]
        sample.json        id, signature class, parcel boxes, change summary

All arrays are row-major. ``meta.json`` records a hash of the generator
config so reruns can be checked for identity.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .synthgen import Parcel, Sample
from .taxonomy import NUM_LEVELS, TaxonomyTree, load_taxonomy, save_taxonomy

SCHEMA_VERSION = 1


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def write_dataset(
    root: str | Path,
    samples: Sequence[Sample],
    tree: TaxonomyTree,
    meta_extra: dict | None = None,
) -> Path:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    first = samples[0]
    meta = {
        "schema_version": SCHEMA_VERSION,
        "hsi_shape": list(first.hsi.shape),
        "msi_shape": list(first.msi.shape),
        "image_shape": list(first.labels.shape[1:]),
        "ratio": first.ratio,
        "level_sizes": list(tree.level_sizes),
        "sample_ids": [s.sample_id for s in samples],
    }
    meta.update(meta_extra or {})
    save_taxonomy(tree, root / "taxonomy.json")
    for sample in samples:
        write_sample(root, sample)
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def write_sample(root: Path, sample: Sample) -> None:
    d = Path(root) / "samples" / sample.sample_id
    d.mkdir(parents=True, exist_ok=True)
    sample.hsi.astype("<f4").tofile(d / "hsi.bin")
    sample.msi.astype("<f4").tofile(d / "msi.bin")
    sample.labels.astype("<u2").tofile(d / "labels.bin")
    sample.prior.astype("<u2").tofile(d / "prior.bin")
    info = {
        "sample_id": sample.sample_id,
        "signature": sample.signature,
        "parcels": [
            {"box": list(p.box), "class4": p.class4, "prior4": p.prior4, "changed": p.changed}
            for p in sample.parcels
        ],
        "total_parcels": len(sample.parcels),
        "changed_parcels": sum(p.changed for p in sample.parcels),
    }
    (d / "sample.json").write_text(json.dumps(info, indent=1))


def read_meta(root: str | Path) -> dict:
    path = Path(root) / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {root} (missing {path})")
    return json.loads(path.read_text())


def read_tree(root: str | Path) -> TaxonomyTree:
    return load_taxonomy(Path(root) / "taxonomy.json")


def read_sample(root: str | Path, sample_id: str) -> Sample:
    meta = read_meta(root)
    d = Path(root) / "samples" / sample_id
    if not d.exists():
        raise FileNotFoundError(f"no sample {sample_id!r} under {root}")
    hsi = np.fromfile(d / "hsi.bin", dtype="<f4").reshape(meta["hsi_shape"])
    msi = np.fromfile(d / "msi.bin", dtype="<f4").reshape(meta["msi_shape"])
    label_shape = [NUM_LEVELS] + list(meta["image_shape"])
    labels = np.fromfile(d / "labels.bin", dtype="<u2").reshape(label_shape)
    prior = np.fromfile(d / "prior.bin", dtype="<u2").reshape(label_shape)
    info = json.loads((d / "sample.json").read_text())
    parcels = tuple(
        Parcel(box=tuple(p["box"]), class4=p["class4"], prior4=p["prior4"])
        for p in info.get("parcels", [])
    )
    return Sample(
        hsi=hsi,
        msi=msi,
        labels=labels,
        prior=prior,
        sample_id=info["sample_id"],
        signature=info["signature"],
        parcels=parcels,
    )


def iter_samples(root: str | Path, sample_ids: Sequence[str] | None = None) -> Iterator[Sample]:
    ids = sample_ids if sample_ids is not None else read_meta(root)["sample_ids"]
    for sid in ids:
        yield read_sample(root, sid)


def read_signatures(root: str | Path) -> dict[str, int]:
    """Signature class per sample, straight from the sidecar files."""
    out = {}
    for sid in read_meta(root)["sample_ids"]:
        info = json.loads((Path(root) / "samples" / sid / "sample.json").read_text())
        out[sid] = info["signature"]
    return out
