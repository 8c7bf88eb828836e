"""Spatiotemporal windowed-attention encoder-decoder for monthly series.

Encoder: a non-overlapping 3D patch embedding, then four stages of
alternating window / shifted-window attention with 2x2x2 patch merging
between stages (temporal size clamps at 1, where merging degrades to
1x2x2). Decoder: three nearest-neighbor upsampling layers fed by
temporally-flattened encoder skips, then a final pixel-shuffle back to
the full input grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import Mlp, pixel_shuffle

logger = logging.getLogger(__name__)

STAGES = 4


@dataclass(frozen=True)
class MsiEncoderConfig:
    bands: int  # C
    months: int  # T
    image_size: tuple[int, int]  # (H, W)
    patch_t: int = 2
    patch_s: int = 4
    base_dim: int = 128  # E_S
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (4, 8, 16, 32)
    window_spatial: int = 7  # M
    window_temporal: int = 2  # K
    mlp_ratio: float = 4.0
    out_dim: int = 128  # E
    use_rel_pos: bool = True

    def stage_dims(self) -> list[tuple[int, int, int, int]]:
        """(T_s, H_s, W_s, C_s) for stages 1..4; temporal halving clamps at 1."""
        t = -(-self.months // self.patch_t)
        h, w = self.image_size[0] // self.patch_s, self.image_size[1] // self.patch_s
        dims = []
        c = self.base_dim
        for _ in range(STAGES):
            dims.append((t, h, w, c))
            t, h, w, c = (t + 1) // 2, h // 2, w // 2, c * 2
        return dims

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch_s or w % self.patch_s:
            raise ValueError(f"image {h}x{w} not divisible by spatial patch {self.patch_s}")
        if (h // self.patch_s) % 8 or (w // self.patch_s) % 8:
            raise ValueError(
                f"embedded grid {h // self.patch_s}x{w // self.patch_s} must be a multiple "
                "of 8 to survive three spatial halvings"
            )
        if len(self.depths) != STAGES or len(self.heads) != STAGES:
            raise ValueError(f"depths and heads must have {STAGES} entries")
        if any(d % 2 for d in self.depths):
            raise ValueError(f"per-stage layer counts must be even (got {self.depths})")
        if self.months < 1:
            raise ValueError("need at least one month of input")


def reshape_skip(x: torch.Tensor) -> torch.Tensor:
    """Fold the temporal axis into channels: [B, T, H, W, C] -> [B, H, W, T*C]."""
    b, t, h, w, c = x.shape
    return x.permute(0, 2, 3, 1, 4).reshape(b, h, w, t * c)


def window_partition(x: torch.Tensor, window: tuple[int, int, int]) -> torch.Tensor:
    """[B, T, H, W, C] -> [B, nWindows, kt*kh*kw, C] over non-overlapping blocks."""
    b, t, h, w, c = x.shape
    kt, kh, kw = window
    x = x.view(b, t // kt, kt, h // kh, kh, w // kw, kw, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, (t // kt) * (h // kh) * (w // kw), kt * kh * kw, c)


def window_reverse(
    x: torch.Tensor, window: tuple[int, int, int], dims: tuple[int, int, int]
) -> torch.Tensor:
    b = x.shape[0]
    t, h, w = dims
    kt, kh, kw = window
    x = x.view(b, t // kt, h // kh, w // kw, kt, kh, kw, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, t, h, w, -1)


def _axis_regions(padded: int, window: int, shift: int) -> torch.Tensor:
    """Region index per position along one padded axis (Swin shift masking)."""
    pos = torch.arange(padded)
    if shift == 0:
        return torch.zeros(padded, dtype=torch.long)
    bounds = torch.tensor([padded - window, padded - shift])
    return torch.searchsorted(bounds, pos, right=True)


class WindowAttention3d(nn.Module):
    """Multi-head attention inside one 3D window, with optional relative bias."""

    def __init__(self, dim: int, heads: int, window: tuple[int, int, int], use_rel_pos: bool):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.window = window
        kt, kh, kw = window
        if use_rel_pos:
            self.rel_bias = nn.Parameter(
                torch.zeros((2 * kt - 1) * (2 * kh - 1) * (2 * kw - 1), heads)
            )
            nn.init.trunc_normal_(self.rel_bias, std=0.02)
            coords = torch.stack(
                torch.meshgrid(
                    torch.arange(kt), torch.arange(kh), torch.arange(kw), indexing="ij"
                )
            ).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]  # [3, N, N]
            rel = rel + torch.tensor([kt - 1, kh - 1, kw - 1])[:, None, None]
            index = (
                rel[0] * (2 * kh - 1) * (2 * kw - 1) + rel[1] * (2 * kw - 1) + rel[2]
            )
            self.register_buffer("rel_index", index, persistent=False)
        else:
            self.rel_bias = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        """x: [B, nW, N, C]; mask: [nW, N, N] additive (0 / -inf) or None."""
        b, nw, n, c = x.shape
        qkv = self.qkv(x).reshape(b, nw, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(3, 0, 1, 4, 2, 5)  # [B, nW, heads, N, hd]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if self.rel_bias is not None:
            bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, self.heads)
            attn = attn + bias.permute(2, 0, 1)
        if mask is not None:
            attn = attn + mask[None, :, None]
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(b, nw, n, c)
        return self.proj(out)


class SwinBlock3d(nn.Module):
    """One W-MSA or SW-MSA layer bound to a static stage grid.

    Padding to window multiples and the cyclic shift are fixed by the
    grid, so the attention mask is precomputed once. Padded cells get a
    sentinel region: they only ever attend to each other and are cropped
    away afterwards.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        grid: tuple[int, int, int],
        window: tuple[int, int, int],
        shifted: bool,
        mlp_ratio: float,
        use_rel_pos: bool,
    ):
        super().__init__()
        self.grid = grid
        self.window = tuple(min(k, g) for k, g in zip(window, grid))
        if self.window != tuple(window):
            logger.warning(
                "window %s clamped to %s for grid %s", tuple(window), self.window, grid
            )
        # no shift along axes the window fully covers (single-window axis)
        self.shift = tuple(
            (k // 2 if shifted and g > k else 0) for k, g in zip(self.window, grid)
        )
        self.padded = tuple(-(-g // k) * k for g, k in zip(grid, self.window))

        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, heads, self.window, use_rel_pos)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.register_buffer("attn_mask", self._build_mask(), persistent=False)

    def _build_mask(self) -> torch.Tensor | None:
        if not any(self.shift) and self.padded == self.grid:
            return None
        # region labels live in the rolled frame (the usual slice trick):
        # within a window, differing regions mean content that wrapped
        # around the boundary and must not attend across the seam
        axes = [
            _axis_regions(p, k, s) for p, k, s in zip(self.padded, self.window, self.shift)
        ]
        region = (
            axes[0][:, None, None] * 9 + axes[1][None, :, None] * 3 + axes[2][None, None, :]
        )
        # padding validity is defined in original coordinates and rolls with x
        valid = torch.ones(self.padded, dtype=torch.bool)
        valid[self.grid[0] :, :, :] = False
        valid[:, self.grid[1] :, :] = False
        valid[:, :, self.grid[2] :] = False
        valid = torch.roll(valid, shifts=[-s for s in self.shift], dims=(0, 1, 2))
        label = torch.where(valid, region, torch.full_like(region, -1))
        windows = window_partition(label[None, ..., None].float(), self.window)[0, ..., 0]
        same = windows[:, :, None] == windows[:, None, :]
        return torch.where(same, 0.0, float("-inf"))

    def window_attention(self, x: torch.Tensor) -> torch.Tensor:
        """Pad, (cyclically shift,) window-attend, undo: same-shape grid."""
        b, t, h, w, c = x.shape
        pt, ph, pw = self.padded
        x = F.pad(x, (0, 0, 0, pw - w, 0, ph - h, 0, pt - t))
        if any(self.shift):
            x = torch.roll(x, shifts=[-s for s in self.shift], dims=(1, 2, 3))
        mask = self.attn_mask
        if mask is not None and mask.dtype != x.dtype:
            mask = mask.to(x.dtype)
        out = self.attn(window_partition(x, self.window), mask)
        x = window_reverse(out, self.window, self.padded)
        if any(self.shift):
            x = torch.roll(x, shifts=list(self.shift), dims=(1, 2, 3))
        return x[:, :t, :h, :w]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.window_attention(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed3d(nn.Module):
    """Non-overlapping 3D patches to tokens (a strided conv as one linear)."""

    def __init__(self, cfg: MsiEncoderConfig):
        super().__init__()
        self.patch_t = cfg.patch_t
        self.patch_s = cfg.patch_s
        self.proj = nn.Linear(cfg.patch_t * cfg.patch_s * cfg.patch_s * cfg.bands, cfg.base_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite multispectral input")
        b, t, h, w, c = x.shape
        pad = (-t) % self.patch_t
        if pad:
            x = torch.cat([x, x[:, -1:].expand(b, pad, h, w, c)], dim=1)
            t += pad
        pt, ps = self.patch_t, self.patch_s
        x = x.view(b, t // pt, pt, h // ps, ps, w // ps, ps, c)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(
            b, t // pt, h // ps, w // ps, pt * ps * ps * c
        )
        return self.proj(x)


class PatchMerge3d(nn.Module):
    """Concatenate a 2x2x2 (or 1x2x2 once time has collapsed) neighborhood."""

    def __init__(self, dim: int, t_in: int):
        super().__init__()
        self.t_in = t_in
        factor = 8 if t_in > 1 else 4
        self.norm = nn.LayerNorm(factor * dim)
        self.reduce = nn.Linear(factor * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot merge odd spatial dims ({h}, {w})")
        if t > 1:
            if t % 2:
                x = torch.cat([x, x[:, -1:]], dim=1)
                t += 1
            x = x.view(b, t // 2, 2, h // 2, 2, w // 2, 2, c)
            x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, t // 2, h // 2, w // 2, 8 * c)
        else:
            x = x.view(b, 1, h // 2, 2, w // 2, 2, c)
            x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, 1, h // 2, w // 2, 4 * c)
        return self.reduce(self.norm(x))


@dataclass
class StageFeatures:
    """Per-stage grids: inputs F_s (post-merge) and outputs X_s (post-attention)."""

    inputs: list[torch.Tensor]
    outputs: list[torch.Tensor]


class MsiEncoder(nn.Module):
    """Full temporal branch: [B, T, H, W, C] -> [B, H, W, E]."""

    def __init__(self, cfg: MsiEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = cfg.stage_dims()
        self.patch_embed = PatchEmbed3d(cfg)
        window = (cfg.window_temporal, cfg.window_spatial, cfg.window_spatial)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s, (t, h, w, c) in enumerate(dims):
            blocks = nn.ModuleList(
                SwinBlock3d(
                    c,
                    cfg.heads[s],
                    (t, h, w),
                    window,
                    shifted=(i % 2 == 1),
                    mlp_ratio=cfg.mlp_ratio,
                    use_rel_pos=cfg.use_rel_pos,
                )
                for i in range(cfg.depths[s])
            )
            self.stages.append(blocks)
            if s < STAGES - 1:
                self.merges.append(PatchMerge3d(c, t_in=t))

        skip_ch = [t * c for (t, _, _, c) in dims]
        self.up_proj = nn.ModuleList()
        self.fuse1 = nn.ModuleList()
        self.fuse2 = nn.ModuleList()
        prev = skip_ch[3]
        for j in (2, 1, 0):  # decoder layers i=1..3 consume stages 3, 2, 1
            self.up_proj.append(nn.Linear(prev, skip_ch[j]))
            self.fuse1.append(nn.Linear(2 * skip_ch[j], skip_ch[j]))
            self.fuse2.append(nn.Linear(skip_ch[j], skip_ch[j]))
            prev = skip_ch[j]
        self.head = nn.Linear(prev, cfg.patch_s * cfg.patch_s * cfg.out_dim)
        self.out_proj = nn.Linear(cfg.out_dim, cfg.out_dim)

    def encode(self, msi: torch.Tensor) -> StageFeatures:
        expected = (self.cfg.months, *self.cfg.image_size, self.cfg.bands)
        if tuple(msi.shape[1:]) != expected:
            raise ValueError(f"expected input {expected}, got {tuple(msi.shape[1:])}")
        x = self.patch_embed(msi)
        inputs, outputs = [], []
        for s, blocks in enumerate(self.stages):
            inputs.append(x)
            for block in blocks:
                x = block(x)
            outputs.append(x)
            if s < STAGES - 1:
                x = self.merges[s](x)
        return StageFeatures(inputs=inputs, outputs=outputs)

    def decode(self, stages: StageFeatures) -> torch.Tensor:
        u = reshape_skip(stages.outputs[3])
        for i, j in enumerate((2, 1, 0)):
            u = u.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
            u = self.up_proj[i](u)
            skip = reshape_skip(stages.inputs[j])
            u = self.fuse2[i](F.relu(self.fuse1[i](torch.cat([u, skip], dim=-1))))
        out = pixel_shuffle(self.head(u), self.cfg.patch_s)
        return self.out_proj(out)

    def forward(self, msi: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(msi))
