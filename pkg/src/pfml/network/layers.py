"""Frame encoder, positional encoder, Transformer and output heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int
    padding: int
    norm: bool = True


@dataclass(frozen=True)
class EncoderConfig:
    layers: Tuple[ConvLayer, ...]
    pool: Optional[int] = None
    dropout: float = 0.1

    def __post_init__(self) -> None:
        layers = tuple(l if isinstance(l, ConvLayer) else ConvLayer(**l) for l in self.layers)
        if not layers:
            raise ValueError("encoder needs at least one conv layer")
        object.__setattr__(self, "layers", layers)

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_channels

    def lengths(self, frame_len: int) -> List[int]:
        """Time length after each conv layer, then after pooling (if any)."""
        out, n = [], frame_len
        for i, layer in enumerate(self.layers):
            n = conv_out_len(n, layer.kernel, layer.stride, layer.padding)
            if n < 1:
                raise ValueError(
                    f"encoder layer {i} (kernel {layer.kernel}, stride {layer.stride}) "
                    f"reduces a {frame_len}-sample frame to length {n}"
                )
            out.append(n)
        if self.pool:
            n = n // self.pool
            if n < 1:
                raise ValueError(f"encoder pool {self.pool} larger than input length {out[-1]}")
            out.append(n)
        return out


def conv_out_len(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _conv_stack(channels, kernels, strides, paddings):
    return tuple(ConvLayer(c, k, s, p) for c, k, s, p in zip(channels, kernels, strides, paddings))


ENCODER_PRESETS = {
    # 16 kHz speech, 30 ms frames
    "speech": EncoderConfig(_conv_stack([128] * 4, [10, 8, 4, 4], [5, 4, 2, 2], [3, 2, 1, 1]), pool=6),
    # 100 Hz EEG, 4 s frames
    "eeg": EncoderConfig(_conv_stack([128] * 3, [10, 8, 4], [5, 5, 3], [3, 2, 1]), pool=5),
    # 64-sample frames of the synthetic presets
    "tiny": EncoderConfig(_conv_stack([32, 32], [8, 4], [4, 2], [2, 1]), pool=8, dropout=0.0),
}


@dataclass(frozen=True)
class TransformerConfig:
    num_blocks: int = 4
    dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    dropout: float = 0.1
    pos_kernel: int = 25
    pos_groups: int = 16

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.dim % self.pos_groups:
            raise ValueError(f"model dim {self.dim} not divisible by {self.pos_groups} conv groups")


def _init_linear(layer: nn.Linear) -> None:
    nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04)
    nn.init.zeros_(layer.bias)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a ``(B, C, T)`` tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class FrameEncoder(nn.Module):
    """Maps frames ``(..., C, N)`` to one embedding per frame ``(..., d)``."""

    def __init__(self, in_channels: int, frame_len: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.frame_len = frame_len
        self.in_channels = in_channels
        lengths = config.lengths(frame_len)
        if lengths[-1] != 1:
            raise ValueError(
                f"encoder leaves {lengths[-1]} time steps per frame (lengths {lengths}); "
                "adjust strides or pooling so each frame maps to one embedding"
            )
        blocks = []
        c_in = in_channels
        for layer in config.layers:
            parts = [nn.Conv1d(c_in, layer.out_channels, layer.kernel, layer.stride, layer.padding)]
            if layer.norm:
                parts.append(ChannelLayerNorm(layer.out_channels))
            parts.append(nn.GELU())
            blocks.append(nn.Sequential(*parts))
            c_in = layer.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        lead = frames.shape[:-2]
        if tuple(frames.shape[-2:]) != (self.in_channels, self.frame_len):
            raise ValueError(
                f"encoder layer 0 expects frames of shape (C={self.in_channels}, "
                f"N={self.frame_len}), got {tuple(frames.shape[-2:])}"
            )
        h = frames.reshape(-1, self.in_channels, self.frame_len)
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == last and self.config.pool:
                h = F.avg_pool1d(h, self.config.pool)
            h = self.dropout(h)
        return h.reshape(*lead, -1)


class PositionalEncoder(nn.Module):
    """Grouped temporal convolution + GeLU + LayerNorm, added residually."""

    def __init__(self, dim: int, kernel: int = 25, groups: int = 16):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)
        self.norm = nn.LayerNorm(dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (B, S, d)
        h = self.conv(z.transpose(1, 2))
        if self.kernel % 2 == 0:
            h = h[..., :-1]
        h = self.norm(F.gelu(h.transpose(1, 2)))
        return z + h


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        _init_linear(self.qkv)
        _init_linear(self.out)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, S, d = x.shape
        q, k, v = self.qkv(x).reshape(B, S, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        weights = torch.softmax(scores, dim=-1)
        h = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, S, d)
        out = self.out(h)
        return (out, weights) if return_weights else out


class TransformerBlock(nn.Module):
    """Pre-norm encoder block."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadSelfAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ff_dim)
        self.ff2 = nn.Linear(cfg.ff_dim, cfg.dim)
        self.dropout = nn.Dropout(cfg.dropout)
        _init_linear(self.ff1)
        _init_linear(self.ff2)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        a = self.attn(self.norm1(x), return_weights=return_weights)
        if return_weights:
            a, w = a
        x = x + self.dropout(a)
        x = x + self.dropout(self.ff2(self.dropout(F.gelu(self.ff1(self.norm2(x))))))
        return (x, w) if return_weights else x


class Transformer(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        weights = []
        for i, block in enumerate(self.blocks):
            x = block(x, return_weights=return_weights)
            if return_weights:
                x, w = x
                weights.append(w)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after transformer block {i}")
        x = self.norm(x)
        return (x, weights) if return_weights else x


class ProjectionHead(nn.Linear):
    """Affine map to ``m * C`` predicted functionals (or ``C * N`` samples for MAE)."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__(dim, out_dim)
        _init_linear(self)


class ClassifierHead(nn.Module):
    """Returns logits; ``probabilities`` applies the softmax.

    ``hidden=None`` gives the single linear layer used for probing; otherwise a
    GeLU hidden layer precedes the output layer.
    """

    def __init__(self, dim: int, num_classes: int, hidden: Optional[int] = None):
        super().__init__()
        self.num_classes = num_classes
        if hidden is None:
            self.net = nn.Linear(dim, num_classes)
            _init_linear(self.net)
        else:
            l1, l2 = nn.Linear(dim, hidden), nn.Linear(hidden, num_classes)
            _init_linear(l1)
            _init_linear(l2)
            self.net = nn.Sequential(l1, nn.GELU(), l2)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)

    def probabilities(self, y: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(y), dim=-1)
