"""Mask sampling and mask replacement for frame embeddings or input frames."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch


class MaskType(str, enum.Enum):
    ONES = "ones"
    ZEROS = "zeros"
    GAUSSIAN_NOISE = "gaussian_noise"
    LEARNABLE_TOKEN = "learnable_token"


class MaskLocation(str, enum.Enum):
    EMBEDDINGS = "embeddings"
    INPUTS = "inputs"


@dataclass(frozen=True)
class MaskConfig:
    p_m: float = 0.1
    l_m: int = 3
    mask_type: MaskType = MaskType.ONES
    mask_location: MaskLocation = MaskLocation.EMBEDDINGS

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_m <= 1.0:
            raise ValueError(f"p_m must be in [0, 1], got {self.p_m}")
        if self.l_m < 1:
            raise ValueError(f"l_m must be >= 1, got {self.l_m}")
        object.__setattr__(self, "mask_type", MaskType(self.mask_type))
        object.__setattr__(self, "mask_location", MaskLocation(self.mask_location))


@dataclass(frozen=True)
class MaskSet:
    starts: np.ndarray
    masked: np.ndarray  # bool, length S


def spans_from_starts(starts: np.ndarray, num_frames: int, l_m: int) -> np.ndarray:
    masked = np.zeros(num_frames, dtype=bool)
    for s in starts:
        masked[s:min(s + l_m, num_frames)] = True
    return masked


def sample_masks(num_frames: int, config: MaskConfig, rng: np.random.Generator) -> MaskSet:
    """Draw mask starts with probability ``p_m`` per frame, each covering ``l_m`` frames.

    Spans are clipped at the sequence end. If no start is drawn, one is chosen
    uniformly so every sequence has at least one masked frame.
    """
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    starts = np.flatnonzero(rng.random(num_frames) < config.p_m)
    if starts.size == 0:
        starts = np.array([rng.integers(num_frames)])
    return MaskSet(starts=starts, masked=spans_from_starts(starts, num_frames, config.l_m))


def sequence_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) tuple, e.g. (seed, epoch, sequence)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def sample_batch_masks(num_frames: int, config: MaskConfig, seed: int, stream: int,
                       sequence_ids) -> np.ndarray:
    """``(B, S)`` masks, one generator per sequence id so batching does not matter."""
    return np.stack([
        sample_masks(num_frames, config, sequence_rng(seed, stream, int(i))).masked
        for i in sequence_ids
    ])


def apply_mask(
    x: torch.Tensor,
    masked,
    mask_type: MaskType = MaskType.ONES,
    token: Optional[torch.Tensor] = None,
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Replace rows of ``x`` (``(..., S, d)``) where ``masked`` (``(..., S)``) is true.

    Unmasked rows pass through untouched; gradients reach ``token`` when it is used.
    """
    mask_type = MaskType(mask_type)
    masked = torch.as_tensor(np.asarray(masked), dtype=torch.bool, device=x.device)
    if masked.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {tuple(masked.shape)} does not match {tuple(x.shape[:-1])}")
    if mask_type is MaskType.LEARNABLE_TOKEN:
        if token is None:
            raise ValueError("learnable_token masking needs a token vector")
        fill = token.to(x.dtype).expand_as(x)
    elif token is not None:
        raise ValueError(f"token given but mask_type is {mask_type.value}")
    elif mask_type is MaskType.ONES:
        fill = torch.ones_like(x)
    elif mask_type is MaskType.ZEROS:
        fill = torch.zeros_like(x)
    else:
        if rng is None:
            raise ValueError("gaussian_noise masking needs an rng")
        noise = rng.standard_normal(tuple(x.shape))
        fill = torch.as_tensor(noise, dtype=x.dtype, device=x.device)
    return torch.where(masked[..., None], fill, x)
