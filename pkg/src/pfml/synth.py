"""Synthetic regime-switching time series with class-dependent dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.signal import lfilter

from pfml.io import DatasetManifest, ManifestEntry, save_manifest, write_sequence
from pfml.timeseries import FrameConfig, Signal


SHAPES = ("linear", "cubic", "rectified", "clipped")


@dataclass(frozen=True)
class SyntheticSpec:
    """Each sequence is a chain of regimes. A regime is an AR(2) process
    (``family="ar"``) or a noisy sinusoid (``family="sinusoid"``) with random
    centre frequency and gain, passed through a static waveform-shaping curve.

    Every sequence has a latent class. For ``family="ar"`` the class picks the
    shaping curve (linear, cubic, half-wave rectified, clipped), which changes
    the amplitude distribution and autocorrelation of the frames while the
    frequency content stays class-independent. For ``family="sinusoid"`` the
    class picks a frequency band instead. A regime follows its sequence's class
    with probability ``class_weight`` and a uniformly drawn class otherwise.
    ``emit_labels=False`` hides the classes (pre-training data).
    """

    family: str = "ar"
    num_classes: int = 4
    emit_labels: bool = True
    class_priors: Optional[Tuple[float, ...]] = None
    channels: int = 2
    num_frames: int = 32
    frame_len: int = 64
    hop: int = 32
    sample_rate: float = 50.0
    count: int = 100
    groups: int = 0  # 0 -> one group per sequence
    regime_frames: float = 8.0  # mean regime length in frames
    class_weight: float = 0.8
    freq_range: Tuple[float, float] = (0.02, 0.25)  # cycles per sample
    radius_range: Tuple[float, float] = (0.7, 0.95)
    gain_sigma: float = 0.5  # log-normal gain spread per regime
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in ("ar", "sinusoid"):
            raise ValueError(f"family must be 'ar' or 'sinusoid', got {self.family!r}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.family == "ar" and self.num_classes > len(SHAPES):
            raise ValueError(f"family 'ar' supports at most {len(SHAPES)} classes")
        if self.class_priors is not None:
            if len(self.class_priors) != self.num_classes:
                raise ValueError("class_priors length must equal num_classes")
            object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))
        object.__setattr__(self, "freq_range", tuple(self.freq_range))
        object.__setattr__(self, "radius_range", tuple(self.radius_range))

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.frame_len, self.hop)

    @property
    def length(self) -> int:
        return self.frame_config.signal_length(self.num_frames)

    def band(self, k: int) -> Tuple[float, float]:
        lo, hi = self.freq_range
        edges = np.geomspace(lo, hi, self.num_classes + 1)
        return float(edges[k]), float(edges[k + 1])


PRESETS = {
    "unlabeled": SyntheticSpec(count=200, emit_labels=False, seed=1),
    "labeled": SyntheticSpec(count=160, groups=40, seed=2),
}


def _shape(x: np.ndarray, k: int) -> np.ndarray:
    name = SHAPES[k]
    if name == "cubic":
        y = x**3
    elif name == "rectified":
        y = np.maximum(x, 0.0)
    elif name == "clipped":
        y = np.clip(x, -0.5, 0.5)
    else:
        y = x
    y = y - y.mean(axis=-1, keepdims=True)
    return y / (y.std(axis=-1, keepdims=True) + 1e-12)


def _regime(rng: np.random.Generator, spec: SyntheticSpec, n: int, k: int) -> np.ndarray:
    band = spec.band(k) if spec.family == "sinusoid" else spec.freq_range
    freq = rng.uniform(*band)
    gain = np.exp(spec.gain_sigma * rng.standard_normal())
    if spec.family == "ar":
        r = rng.uniform(*spec.radius_range)
        a = [1.0, -2 * r * np.cos(2 * np.pi * freq), r * r]
        burn = 50
        e = rng.standard_normal((spec.channels, n + burn))
        x = lfilter([1.0], a, e, axis=-1)[:, burn:]
        x = _shape(x / (x.std(axis=-1, keepdims=True) + 1e-12), k)
    else:
        t = np.arange(n)
        phase = rng.uniform(0, 2 * np.pi, size=(spec.channels, 1))
        x = np.sin(2 * np.pi * freq * t + phase) + 0.3 * rng.standard_normal((spec.channels, n))
    return gain * x


def generate_sequence(spec: SyntheticSpec, rng: np.random.Generator, label: int) -> Signal:
    L = spec.length
    out = np.empty((spec.channels, L))
    pos = 0
    mean_len = spec.regime_frames * spec.hop
    while pos < L:
        n = min(int(rng.geometric(1.0 / mean_len)) + spec.hop, L - pos)
        k = label if rng.random() < spec.class_weight else int(rng.integers(spec.num_classes))
        out[:, pos:pos + n] = _regime(rng, spec, n, k)
        pos += n
    out += spec.noise * rng.standard_normal(out.shape)
    return Signal(out.astype(np.float32), spec.sample_rate)


def generate(spec: SyntheticSpec):
    """Returns ``(signals, labels or None, groups)``; deterministic in ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    priors = spec.class_priors or (1.0 / spec.num_classes,) * spec.num_classes
    labels = label_rng.choice(spec.num_classes, size=spec.count, p=np.asarray(priors) / sum(priors))
    n_groups = spec.groups or spec.count
    groups = np.arange(spec.count) % n_groups
    seq_seeds = np.random.SeedSequence([spec.seed, 1]).spawn(spec.count)
    signals = [
        generate_sequence(spec, np.random.default_rng(s), int(labels[i]))
        for i, s in enumerate(seq_seeds)
    ]
    return signals, (labels if spec.emit_labels else None), groups


def write_dataset(spec: SyntheticSpec, out_dir: Union[str, Path]) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "sequences").mkdir(parents=True, exist_ok=True)
    signals, labels, groups = generate(spec)
    entries = []
    for i, sig in enumerate(signals):
        rel = f"sequences/seq_{i:05d}.pfts"
        write_sequence(out_dir / rel, sig)
        entries.append(ManifestEntry(
            path=rel,
            label=None if labels is None else int(labels[i]),
            group=f"g{int(groups[i]):04d}",
        ))
    manifest = DatasetManifest(
        channels=spec.channels, sample_rate=spec.sample_rate, frame_len=spec.frame_len,
        hop=spec.hop, entries=entries, task="synthetic" if labels is not None else "unlabeled",
        num_classes=spec.num_classes if labels is not None else 0, root=out_dir,
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest
