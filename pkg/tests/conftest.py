import pytest

from hiercrop.synthgen import SynthConfig, build_class_signals
from hiercrop.taxonomy import build_tree


def toy_tree(n_level1=2, n_level2=2, n_level3=2, n_level4=2):
    """Regular tree: each node fans out the given number of children."""
    codes = []
    for a in range(1, n_level1 + 1):
        for b in range(1, n_level2 + 1):
            for c in range(1, n_level3 + 1):
                for d in range(1, n_level4 + 1):
                    codes.append(f"33{a:02d}{b:02d}{c:02d}{d:02d}")
    return build_tree(codes)


@pytest.fixture
def small_tree():
    return toy_tree(2, 2, 2, 2)  # sizes (2, 4, 8, 16)


@pytest.fixture
def small_cfg(small_tree):
    return SynthConfig(
        tree=small_tree,
        hsi_bands=12,
        hsi_size=(8, 8),
        months=6,
        msi_bands=4,
        image_size=(24, 24),
        parcels_per_image=(3, 6),
        parcel_cells=(2, 4),
        change_fraction=0.3,
        seed=42,
    )
