"""Dual-stream hierarchical crop type classification toolkit.

A hyperspectral snapshot encoder (spectral-spatial decoupled
transformer) and a multispectral time-series encoder (spatiotemporal
windowed attention) feed four cascaded per-pixel classification heads,
one per taxonomy level, optionally conditioned on prior-year crop maps.
Ships with a synthetic scene generator, frequency-aware dataset
splitting, stratified evaluation, and a training/ablation harness.
"""

from .taxonomy import TaxonomyTree, build_tree, bundled_taxonomy, parse_code

__version__ = "0.1.0"

__all__ = ["TaxonomyTree", "build_tree", "bundled_taxonomy", "parse_code", "__version__"]
