"""Cascaded hierarchical classification heads and the multi-level loss.

Each level k gets one per-pixel convolution over the concatenation of
(previous-level probabilities when cascading, shared fused features,
one-hot prior-year encodings). Level-k logits have N_k channels for
class ids 1..N_k; background (id 0) is never predicted, only masked out
of the loss and the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

HEAD_MODES = ("hierarchical", "independent")


@dataclass
class CascadeOutputs:
    """Per-level logits [B, H, W, N_k], plus softmax probabilities on demand."""

    logits: list[torch.Tensor]

    def probabilities(self, level: int) -> torch.Tensor:
        return self.logits[level - 1].softmax(dim=-1)

    def argmax_stack(self) -> torch.Tensor:
        """Predicted class ids (1-based) as a [B, 4, H, W] integer raster."""
        preds = [lg.argmax(dim=-1) + 1 for lg in self.logits]
        return torch.stack(preds, dim=1)


def encode_priors(
    prior: torch.Tensor, level_sizes: Sequence[int]
) -> list[torch.Tensor]:
    """One-hot grids R_k [B, H, W, N_k + 1] from a [B, 4, H, W] id raster.

    Channel 0 is background/unknown; a missing prior map is represented
    upstream by all-zero grids instead.
    """
    out = []
    for k, n in enumerate(level_sizes):
        ids = prior[:, k].long()
        if int(ids.max()) > n:
            raise ValueError(f"prior id {int(ids.max())} out of range at level {k + 1}")
        out.append(F.one_hot(ids, num_classes=n + 1).to(torch.get_default_dtype()))
    return out


class CascadeHeads(nn.Module):
    """Four per-pixel heads over fused features, priors, and the cascade."""

    def __init__(
        self,
        feature_dim: int,
        level_sizes: Sequence[int],
        mode: str = "hierarchical",
    ):
        super().__init__()
        if mode not in HEAD_MODES:
            raise ValueError(f"heads mode must be one of {HEAD_MODES} (got {mode!r})")
        self.mode = mode
        self.level_sizes = tuple(level_sizes)
        self.feature_dim = feature_dim
        heads = []
        for k, n in enumerate(self.level_sizes, start=1):
            in_ch = feature_dim + n + 1  # features + prior one-hot (incl. background)
            if mode == "hierarchical" and k > 1:
                in_ch += self.level_sizes[k - 2]  # previous-level probabilities
            heads.append(nn.Linear(in_ch, n))
        self.heads = nn.ModuleList(heads)

    def forward(
        self, features: torch.Tensor, priors: Optional[list[torch.Tensor]] = None
    ) -> CascadeOutputs:
        b, h, w, c = features.shape
        if c != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} feature channels, got {c}")
        if priors is None:
            priors = [
                features.new_zeros(b, h, w, n + 1) for n in self.level_sizes
            ]
        logits: list[torch.Tensor] = []
        prev_probs: Optional[torch.Tensor] = None
        for k, head in enumerate(self.heads, start=1):
            parts = [features, priors[k - 1].to(features.dtype)]
            if self.mode == "hierarchical" and prev_probs is not None:
                parts.insert(0, prev_probs)  # operand order: [P^(k-1); O_F; R_k]
            out = head(torch.cat(parts, dim=-1))
            logits.append(out)
            if self.mode == "hierarchical":
                prev_probs = out.softmax(dim=-1)
        return CascadeOutputs(logits=logits)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_level: list[torch.Tensor]
    valid_pixels: list[int]

    @property
    def empty_levels(self) -> list[int]:
        return [k + 1 for k, n in enumerate(self.valid_pixels) if n == 0]


def composite_loss(outputs: CascadeOutputs, labels: torch.Tensor) -> LossBreakdown:
    """Sum over levels of the mean cross-entropy on labeled pixels.

    ``labels`` is a [B, 4, H, W] id raster; background pixels (id 0) are
    excluded per level. A level with no labeled pixels contributes zero
    and is reported through ``empty_levels``.
    """
    per_level: list[torch.Tensor] = []
    valid: list[int] = []
    for k, logits in enumerate(outputs.logits):
        target = labels[:, k].long()
        if target.shape != logits.shape[:-1]:
            raise ValueError(
                f"label grid {tuple(target.shape)} does not match logits "
                f"{tuple(logits.shape[:-1])} at level {k + 1}"
            )
        mask = target > 0
        n = int(mask.sum())
        valid.append(n)
        if n == 0:
            per_level.append(logits.sum() * 0.0)
            continue
        flat = logits[mask]
        per_level.append(F.cross_entropy(flat, target[mask] - 1))
    total = per_level[0] + per_level[1] + per_level[2] + per_level[3]
    if not torch.isfinite(total):
        raise ValueError("non-finite loss")
    return LossBreakdown(total=total, per_level=per_level, valid_pixels=valid)
