"""Signals, framing and per-sequence preprocessing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Signal:
    """Multi-channel sampled waveform, shape ``(C, L)``."""

    data: np.ndarray
    sample_rate: float

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"signal data must be (channels, samples), got shape {data.shape}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise ValueError("signal contains NaN or Inf")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int
    hop: int

    def __post_init__(self) -> None:
        if self.frame_len < 2:
            raise ValueError(f"frame_len must be >= 2, got {self.frame_len}")
        if not 1 <= self.hop <= self.frame_len:
            raise ValueError(f"hop must be in [1, frame_len], got {self.hop}")

    def num_frames(self, length: int) -> int:
        if length < self.frame_len:
            return 0
        return (length - self.frame_len) // self.hop + 1

    def signal_length(self, num_frames: int) -> int:
        """Shortest signal length that yields ``num_frames`` frames."""
        return (num_frames - 1) * self.hop + self.frame_len


@dataclass
class FrameSequence:
    frames: np.ndarray  # (S, C, N)
    frame_config: FrameConfig
    source_id: Optional[str] = None
    starts: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def frame_signal(signal: Signal, config: FrameConfig, source_id: Optional[str] = None) -> FrameSequence:
    """Cut ``signal`` into rectangular frames; a trailing partial frame is dropped."""
    length = signal.length
    if length < config.frame_len:
        raise ValueError(
            f"signal shorter than frame: {length} samples < frame_len {config.frame_len}"
        )
    n_frames = config.num_frames(length)
    starts = np.arange(n_frames) * config.hop
    idx = starts[:, None] + np.arange(config.frame_len)[None, :]
    # (C, S, N) -> (S, C, N)
    frames = np.ascontiguousarray(signal.data[:, idx].transpose(1, 0, 2))
    return FrameSequence(frames=frames, frame_config=config, source_id=source_id, starts=starts)


def znormalize(signal: Signal) -> Signal:
    """Per-channel z-score with population std; constant channels become zeros."""
    x = signal.data.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    scale = np.maximum(np.abs(x).max(axis=1, keepdims=True), 1.0)
    std = np.where(std <= 1e-12 * scale, 1.0, std)
    out = centered / std
    return Signal(out.astype(signal.data.dtype, copy=False), signal.sample_rate)


def pad_or_truncate(signal: Signal, target_len: int) -> Signal:
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    data = signal.data
    if data.shape[1] >= target_len:
        out = data[:, :target_len].copy()
    else:
        out = np.zeros((data.shape[0], target_len), dtype=data.dtype)
        out[:, : data.shape[1]] = data
    return Signal(out, signal.sample_rate)


def frames_for_sequences(
    signals: Sequence[Signal],
    config: FrameConfig,
    num_frames: Optional[int] = None,
    normalize: bool = False,
) -> np.ndarray:
    """Stack framed signals into ``(num_seq, S, C, N)``.

    With ``num_frames`` set, each (optionally normalized) signal is zero-padded or
    truncated to exactly that many frames first.
    """
    out = []
    for sig in signals:
        if normalize:
            sig = znormalize(sig)
        if num_frames is not None:
            sig = pad_or_truncate(sig, config.signal_length(num_frames))
        out.append(frame_signal(sig, config).frames)
    shapes = {f.shape for f in out}
    if len(shapes) != 1:
        raise ValueError(f"sequences frame to different shapes {sorted(shapes)}; set num_frames")
    return np.stack(out)
