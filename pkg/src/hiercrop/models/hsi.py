"""Spectral-spatial decoupled transformer over hyperspectral cubes.

Two parallel token streams: the spatial stream treats every coarse
pixel's spectrum as one token; the spectral stream average-pools the
scene into a small grid of spectral-profile tokens. Both project back
to grids and pixel-shuffle up to the fine-resolution output, where a
two-layer per-pixel fusion combines them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import TokenTransformer, pixel_shuffle


@dataclass(frozen=True)
class HsiEncoderConfig:
    bands: int  # C'
    input_size: tuple[int, int]  # (H', W') coarse grid
    output_size: tuple[int, int]  # (H, W) fine grid
    embed_dim: int = 768
    depth: int = 6
    heads: int = 12
    spectral_pool: tuple[int, int] = (4, 4)
    spectral_dim: int = 256
    spectral_depth: int = 6
    spectral_heads: int = 8
    out_dim: int = 128
    mlp_ratio: float = 4.0
    use_pos: bool = True

    @property
    def ratio(self) -> int:
        return self.output_size[0] // self.input_size[0]

    @property
    def pooled_size(self) -> tuple[int, int]:
        return (
            self.input_size[0] // self.spectral_pool[0],
            self.input_size[1] // self.spectral_pool[1],
        )

    @property
    def spectral_ratio(self) -> int:
        return self.output_size[0] // self.pooled_size[0]

    def validate(self) -> None:
        hp, wp = self.input_size
        h, w = self.output_size
        r = self.ratio
        if r < 1 or (hp * r, wp * r) != (h, w):
            raise ValueError(f"output {h}x{w} is not an integer multiple of input {hp}x{wp}")
        if hp % self.spectral_pool[0] or wp % self.spectral_pool[1]:
            raise ValueError(
                f"pooling {self.spectral_pool} does not divide the input grid {hp}x{wp}"
            )
        ph, pw = self.pooled_size
        rs = self.spectral_ratio
        if (ph * rs, pw * rs) != (h, w):
            raise ValueError(f"pooled grid {ph}x{pw} does not divide the output {h}x{w}")


class SpatialStream(nn.Module):
    """Per-pixel spectral tokens -> transformer -> channel expand -> shuffle."""

    def __init__(self, cfg: HsiEncoderConfig):
        super().__init__()
        self.cfg = cfg
        hp, wp = cfg.input_size
        self.transformer = TokenTransformer(
            cfg.bands, cfg.embed_dim, cfg.depth, cfg.heads, hp * wp, cfg.mlp_ratio, cfg.use_pos
        )
        # channel expansion so the shuffle lands on the fine grid at out_dim
        self.expand = nn.Linear(cfg.embed_dim, cfg.ratio * cfg.ratio * cfg.out_dim)

    def forward(self, hsi: torch.Tensor) -> torch.Tensor:
        b, hp, wp, _ = hsi.shape
        tokens = self.transformer(hsi.reshape(b, hp * wp, -1))
        grid = self.expand(tokens).reshape(b, hp, wp, -1)
        return pixel_shuffle(grid, self.cfg.ratio)


class SpectralStream(nn.Module):
    """Pooled spectral-profile tokens -> transformer -> shuffle to full grid."""

    def __init__(self, cfg: HsiEncoderConfig):
        super().__init__()
        self.cfg = cfg
        ph, pw = cfg.pooled_size
        self.transformer = TokenTransformer(
            cfg.bands,
            cfg.spectral_dim,
            cfg.spectral_depth,
            cfg.spectral_heads,
            ph * pw,
            cfg.mlp_ratio,
            cfg.use_pos,
        )
        rs = cfg.spectral_ratio
        self.expand = nn.Linear(cfg.spectral_dim, rs * rs * cfg.out_dim)

    def forward(self, hsi: torch.Tensor) -> torch.Tensor:
        b, hp, wp, c = hsi.shape
        kh, kw = self.cfg.spectral_pool
        pooled = hsi.reshape(b, hp // kh, kh, wp // kw, kw, c).mean(dim=(2, 4))
        ph, pw = pooled.shape[1:3]
        tokens = self.transformer(pooled.reshape(b, ph * pw, c))
        grid = self.expand(tokens).reshape(b, ph, pw, -1)
        return pixel_shuffle(grid, self.cfg.spectral_ratio)


class HsiFusion(nn.Module):
    """Two per-pixel convolutions with a ReLU between: 2E -> E -> E."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Linear(2 * dim, dim)
        self.conv2 = nn.Linear(dim, dim)

    def forward(self, o_s: torch.Tensor, o_p: torch.Tensor) -> torch.Tensor:
        if o_s.shape[:-1] != o_p.shape[:-1]:
            raise ValueError(f"grid mismatch: {tuple(o_s.shape)} vs {tuple(o_p.shape)}")
        return self.conv2(F.relu(self.conv1(torch.cat([o_s, o_p], dim=-1))))


class HsiEncoder(nn.Module):
    """Full hyperspectral branch: [B, H', W', C'] -> [B, H, W, E]."""

    def __init__(self, cfg: HsiEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.spatial = SpatialStream(cfg)
        self.spectral = SpectralStream(cfg)
        self.fuse = HsiFusion(cfg.out_dim)

    def forward(self, hsi: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(hsi).all():
            raise ValueError("non-finite hyperspectral input")
        expected = (*self.cfg.input_size, self.cfg.bands)
        if tuple(hsi.shape[1:]) != expected:
            raise ValueError(f"expected input {expected}, got {tuple(hsi.shape[1:])}")
        return self.fuse(self.spatial(hsi), self.spectral(hsi))
