"""Full dual-stream classifier and checkpoint handling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ..dataset_io import config_hash
from .heads import CascadeHeads, CascadeOutputs, encode_priors
from .hsi import HsiEncoder, HsiEncoderConfig
from .msi import MsiEncoder, MsiEncoderConfig


@dataclass(frozen=True)
class ModalityConfig:
    use_hyper: bool = False
    use_prior: bool = False
    heads_mode: str = "hierarchical"

    def label(self) -> str:
        parts = ["S2"]
        if self.use_prior:
            parts.append("Prior")
        if self.use_hyper:
            parts.append("Hyper")
        tag = "+".join(parts) if len(parts) > 1 else "S2-only"
        if self.heads_mode != "hierarchical":
            tag += f" ({self.heads_mode})"
        return tag


@dataclass(frozen=True)
class ModelConfig:
    level_sizes: tuple[int, ...]
    msi: MsiEncoderConfig
    hsi: Optional[HsiEncoderConfig] = None
    modality: ModalityConfig = field(default_factory=ModalityConfig)

    def validate(self) -> None:
        self.msi.validate()
        if self.modality.use_hyper:
            if self.hsi is None:
                raise ValueError("use_hyper requires a hyperspectral encoder config")
            self.hsi.validate()
            if self.hsi.output_size != self.msi.image_size:
                raise ValueError(
                    f"encoder output grids disagree: {self.hsi.output_size} vs "
                    f"{self.msi.image_size}"
                )
            if self.hsi.out_dim != self.msi.out_dim:
                raise ValueError("both encoders must share the output feature dim")

    def to_dict(self) -> dict:
        return asdict(self)


class CropClassifier(nn.Module):
    """MSI encoder (+ optional HSI encoder) feeding the cascade heads.

    Inputs are channels-last: msi [B, T, H, W, C], hsi [B, H', W', C'],
    prior [B, 4, H, W] integer ids.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.msi_encoder = MsiEncoder(cfg.msi)
        self.hsi_encoder = HsiEncoder(cfg.hsi) if cfg.modality.use_hyper else None
        feature_dim = cfg.msi.out_dim * (2 if cfg.modality.use_hyper else 1)
        self.heads = CascadeHeads(feature_dim, cfg.level_sizes, cfg.modality.heads_mode)

    def fused_features(
        self, msi: torch.Tensor, hsi: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        o_m = self.msi_encoder(msi)
        if self.hsi_encoder is None:
            return o_m
        if hsi is None:
            raise ValueError("model was built with use_hyper but got no hyperspectral input")
        o_h = self.hsi_encoder(hsi)
        if o_h.shape[:-1] != o_m.shape[:-1]:
            raise ValueError(f"grid mismatch: {tuple(o_h.shape)} vs {tuple(o_m.shape)}")
        return torch.cat([o_h, o_m], dim=-1)  # hyper first

    def forward(
        self,
        msi: torch.Tensor,
        hsi: Optional[torch.Tensor] = None,
        prior: Optional[torch.Tensor] = None,
    ) -> CascadeOutputs:
        features = self.fused_features(msi, hsi)
        priors = None
        if self.cfg.modality.use_prior:
            if prior is None:
                raise ValueError("model was built with use_prior but got no prior raster")
            priors = encode_priors(prior, self.cfg.level_sizes)
        return self.heads(features, priors)


def save_checkpoint(model: CropClassifier, path: str | Path, extra: dict | None = None) -> Path:
    """Named float32 parameter arrays (npz) plus a JSON shape manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    np.savez(path / "params.npz", **state)
    cfg_dict = model.cfg.to_dict()
    manifest = {
        "params": {k: list(v.shape) for k, v in state.items()},
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path: str | Path) -> CropClassifier:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = model_config_from_dict(manifest["config"])
    model = CropClassifier(cfg)
    arrays = np.load(path / "params.npz")
    state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    model.load_state_dict(state)
    model.eval()
    return model


def model_config_from_dict(d: dict) -> ModelConfig:
    def _tup(x):
        return tuple(x) if isinstance(x, list) else x

    msi = {k: _tup(v) for k, v in d["msi"].items()}
    hsi = {k: _tup(v) for k, v in d["hsi"].items()} if d.get("hsi") else None
    return ModelConfig(
        level_sizes=tuple(d["level_sizes"]),
        msi=MsiEncoderConfig(**msi),
        hsi=HsiEncoderConfig(**hsi) if hsi else None,
        modality=ModalityConfig(**d["modality"]),
    )
