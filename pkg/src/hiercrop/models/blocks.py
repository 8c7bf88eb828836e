"""Shared transformer building blocks (channels-last tensors throughout)."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange channel blocks into space: [..., H, W, r*r*E] -> [..., rH, rW, E].

    Pure permutation, position-major channel layout:
    ``out[..., r*i+a, r*j+b, e] = x[..., i, j, (a*r+b)*E + e]``.
    """
    *lead, h, w, c = x.shape
    if c % (r * r) != 0:
        raise ValueError(f"channel count {c} not divisible by r^2={r * r}")
    e = c // (r * r)
    x = x.reshape(*lead, h, w, r, r, e)
    k = len(lead)
    x = x.permute(*range(k), k, k + 2, k + 1, k + 3, k + 4)  # [..., h, r, w, r, e]
    return x.reshape(*lead, h * r, w * r, e)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    *lead, hh, ww, e = x.shape
    if hh % r or ww % r:
        raise ValueError(f"spatial dims ({hh}, {ww}) not divisible by r={r}")
    h, w = hh // r, ww // r
    x = x.reshape(*lead, h, r, w, r, e)
    k = len(lead)
    x = x.permute(*range(k), k, k + 2, k + 1, k + 3, k + 4)  # [..., h, w, r, r, e]
    return x.reshape(*lead, h, w, r * r * e)


class MultiHeadAttention(nn.Module):
    """Plain softmax attention over token sequences [B, N, D]."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # [B, heads, N, hd]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if bias is not None:
            attn = attn + bias  # [.., heads, N, N] broadcast; -inf excludes pairs
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: attention and feed-forward, each with a residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TokenTransformer(nn.Module):
    """Token pipeline: linear embed, optional learned positions, N blocks."""

    def __init__(
        self,
        in_dim: int,
        dim: int,
        depth: int,
        heads: int,
        num_tokens: int,
        mlp_ratio: float = 4.0,
        use_pos: bool = True,
    ):
        super().__init__()
        self.embed = nn.Linear(in_dim, dim)
        self.pos = nn.Parameter(torch.zeros(num_tokens, dim)) if use_pos else None
        if use_pos:
            nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim) if depth > 0 else nn.Identity()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.embed(tokens)
        if self.pos is not None:
            x = x + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)
