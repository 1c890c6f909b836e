"""Model assembly: backbone (encoder -> mask -> positional encoder -> Transformer) plus heads."""

from __future__ import annotations

import hashlib
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from pfml.masking import MaskConfig, MaskLocation, MaskType, apply_mask
from pfml.network.layers import (
    ClassifierHead,
    EncoderConfig,
    FrameEncoder,
    PositionalEncoder,
    ProjectionHead,
    Transformer,
    TransformerConfig,
)


class Backbone(nn.Module):
    def __init__(
        self,
        channels: int,
        frame_len: int,
        encoder: EncoderConfig,
        transformer: TransformerConfig,
        mask: Optional[MaskConfig] = None,
    ):
        super().__init__()
        self.channels = channels
        self.frame_len = frame_len
        self.mask_config = mask
        self.encoder = FrameEncoder(channels, frame_len, encoder)
        self.input_proj = None
        if encoder.out_dim != transformer.dim:
            self.input_proj = nn.Linear(encoder.out_dim, transformer.dim)
        self.pos = PositionalEncoder(transformer.dim, transformer.pos_kernel, transformer.pos_groups)
        self.transformer = Transformer(transformer)
        self.mask_token = None
        if mask is not None and mask.mask_type is MaskType.LEARNABLE_TOKEN:
            size = transformer.dim if mask.mask_location is MaskLocation.EMBEDDINGS else channels * frame_len
            self.mask_token = nn.Parameter(torch.empty(size).uniform_())

    @property
    def dim(self) -> int:
        return self.pos.norm.normalized_shape[0]

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        z = self.encoder(frames)
        if self.input_proj is not None:
            z = self.input_proj(z)
        return z

    def forward(
        self,
        frames: torch.Tensor,
        masked=None,
        rng: Optional[np.random.Generator] = None,
    ) -> Dict[str, torch.Tensor]:
        """``frames``: ``(B, S, C, N)``; ``masked``: optional ``(B, S)`` booleans.

        Returns the unmasked embeddings ``z`` and the Transformer outputs ``y``.
        """
        cfg = self.mask_config
        if masked is not None and cfg is None:
            raise ValueError("model built without a mask config cannot apply masks")
        if masked is not None and cfg.mask_location is MaskLocation.INPUTS:
            B, S, C, N = frames.shape
            flat = apply_mask(frames.reshape(B, S, C * N), masked, cfg.mask_type, self.mask_token, rng)
            frames = flat.reshape(B, S, C, N)
            z = self.embed(frames)
            h = z
        else:
            z = self.embed(frames)
            h = z if masked is None else apply_mask(z, masked, cfg.mask_type, self.mask_token, rng)
        y = self.transformer(self.pos(h))
        return {"z": z, "y": y}


class PretrainModel(nn.Module):
    """Backbone with a linear head predicting functionals (PFML) or raw frames (MAE)."""

    def __init__(self, backbone: Backbone, target_dim: int):
        super().__init__()
        self.backbone = backbone
        self.head = ProjectionHead(backbone.dim, target_dim)

    def forward(self, frames, masked=None, rng=None) -> Dict[str, torch.Tensor]:
        out = self.backbone(frames, masked, rng)
        out["pred"] = self.head(out["y"])
        return out


class Classifier(nn.Module):
    """Backbone with a classification head; ``pooling`` is ``mean`` or ``frame``."""

    def __init__(self, backbone: Backbone, num_classes: int, hidden: Optional[int] = None,
                 pooling: str = "mean"):
        super().__init__()
        if pooling not in ("mean", "frame"):
            raise ValueError(f"pooling must be 'mean' or 'frame', got {pooling!r}")
        self.backbone = backbone
        self.pooling = pooling
        self.head = ClassifierHead(backbone.dim, num_classes, hidden)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        y = self.backbone(frames)["y"]
        return y.mean(dim=1) if self.pooling == "mean" else y

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(frames))


def backbone_parameters(model: nn.Module):
    return [p for n, p in model.named_parameters() if n.startswith("backbone.")]


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
