"""Per-frame statistical functionals used as prediction targets.

All moments use the population (1/N) convention, so the lag-0 autocorrelation is
exactly one. Frames with zero variance get 0 for every variance-normalized value
(skewness, kurtosis and the four autocorrelation moments).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional, Sequence, Union

import numpy as np


class FunctionalId(enum.IntEnum):
    MEAN = 0
    VARIANCE = 1
    SKEWNESS = 2
    KURTOSIS = 3
    MIN = 4
    MAX = 5
    ZCR = 6
    ACF_MEAN = 7
    ACF_VARIANCE = 8
    ACF_SKEWNESS = 9
    ACF_KURTOSIS = 10

    @classmethod
    def parse(cls, value: Union[str, int, "FunctionalId"]) -> "FunctionalId":
        if isinstance(value, FunctionalId):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"ACFMEAN": "ACF_MEAN", "ACFVARIANCE": "ACF_VARIANCE",
                   "ACFSKEWNESS": "ACF_SKEWNESS", "ACFKURTOSIS": "ACF_KURTOSIS"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown functional {value!r}") from None


ALL_FUNCTIONALS = tuple(FunctionalId)


@dataclass(frozen=True)
class FunctionalSet:
    ids: tuple = ALL_FUNCTIONALS
    include_lag0: bool = False

    def __post_init__(self) -> None:
        ids = tuple(FunctionalId.parse(i) for i in self.ids)
        if not 1 <= len(ids) <= len(FunctionalId):
            raise ValueError(f"functional set must have 1..11 members, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate functionals in {[i.name for i in ids]}")
        object.__setattr__(self, "ids", ids)

    @property
    def m(self) -> int:
        return len(self.ids)

    def names(self) -> List[str]:
        return [i.name.lower() for i in self.ids]


# Relative threshold below which a frame is treated as constant.
_DEGENERATE_RTOL = 1e-12


def _degenerate(var: np.ndarray, x: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(x).max(axis=-1), 1e-300)
    return var <= (_DEGENERATE_RTOL * scale) ** 2


def compute_zcr(frame: np.ndarray) -> np.ndarray:
    """Zero-crossing rate along the last axis, with sgn(0) = 0. Range [0, 2]."""
    x = np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError(f"ZCR needs at least 2 samples, got {n}")
    s = np.sign(x)
    return np.abs(np.diff(s, axis=-1)).sum(axis=-1) / (n - 1)


def _autocov_sums(centered: np.ndarray) -> np.ndarray:
    """sum_k c[k+tau] c[k] for tau = 0..N-1, via zero-padded FFT."""
    n = centered.shape[-1]
    nfft = 1 << int(np.ceil(np.log2(2 * n - 1)))
    spec = np.fft.rfft(centered, n=nfft, axis=-1)
    return np.fft.irfft(spec * np.conj(spec), n=nfft, axis=-1)[..., :n]


def compute_acf(frame: np.ndarray) -> np.ndarray:
    """Autocorrelation at lags 0..N-1 along the last axis.

    Raises ``ValueError`` for a constant frame, where the ACF is undefined.
    """
    x = np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError(f"ACF needs at least 2 samples, got {n}")
    c = x - _centered_mean(x)[..., None]
    var = np.mean(c**2, axis=-1)
    if np.any(_degenerate(var, x)):
        raise ValueError("ACF undefined for a constant frame (zero variance)")
    return _acf_from_centered(c, var)


def _acf_from_centered(c: np.ndarray, var: np.ndarray) -> np.ndarray:
    n = c.shape[-1]
    sums = _autocov_sums(c)
    acf = sums / (np.arange(n, 0, -1) * var[..., None])
    acf[..., 0] = 1.0
    return acf


def _centered_mean(v: np.ndarray) -> np.ndarray:
    # second pass removes rounding error of the first when the offset dwarfs the spread
    mean = v.mean(axis=-1)
    return mean + (v - mean[..., None]).mean(axis=-1)


def _moments(v: np.ndarray, degenerate: Optional[np.ndarray] = None):
    """Population mean, variance, skewness and (non-excess) kurtosis on the last axis."""
    mean = _centered_mean(v)
    c = v - mean[..., None]
    var = np.mean(c**2, axis=-1)
    if degenerate is None:
        degenerate = _degenerate(var, v)
    # standardized moments are scale-free; rescaling avoids under/overflow of var**1.5
    scale = np.abs(c).max(axis=-1)
    cs = c / np.where(scale > 0, scale, 1.0)[..., None]
    vs = np.where(degenerate, 1.0, np.mean(cs**2, axis=-1))
    skew = np.mean(cs**3, axis=-1) / vs**1.5
    kurt = np.mean(cs**4, axis=-1) / vs**2
    skew = np.where(degenerate, 0.0, skew)
    kurt = np.where(degenerate, 0.0, kurt)
    return mean, var, skew, kurt


def compute_functionals(frames: np.ndarray, fset: FunctionalSet = FunctionalSet()) -> np.ndarray:
    """Functionals of ``frames`` with shape ``(..., C, N)``.

    Returns ``(..., m * C)`` in functional-major layout: all channels of the first
    functional, then all channels of the second, and so on.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError(f"frames must be (..., C, N), got shape {x.shape}")
    n = x.shape[-1]
    if n < 2:
        raise ValueError(f"functionals need frames of at least 2 samples, got {n}")

    mean, var, skew, kurt = _moments(x)
    degenerate = _degenerate(var, x)
    mn = x.min(axis=-1)
    mx = x.max(axis=-1)
    mean = np.clip(mean, mn, mx)
    var = np.where(degenerate, 0.0, var)

    values = {
        FunctionalId.MEAN: mean,
        FunctionalId.VARIANCE: var,
        FunctionalId.SKEWNESS: skew,
        FunctionalId.KURTOSIS: kurt,
        FunctionalId.MIN: mn,
        FunctionalId.MAX: mx,
    }
    if FunctionalId.ZCR in fset.ids:
        values[FunctionalId.ZCR] = compute_zcr(x)

    acf_ids = {FunctionalId.ACF_MEAN, FunctionalId.ACF_VARIANCE,
               FunctionalId.ACF_SKEWNESS, FunctionalId.ACF_KURTOSIS}
    if acf_ids & set(fset.ids):
        c = x - _centered_mean(x)[..., None]
        acf = _acf_from_centered(c, np.where(degenerate, 1.0, var))
        lags = acf if fset.include_lag0 else acf[..., 1:]
        a_mean, a_var, a_skew, a_kurt = _moments(lags)
        zero = np.zeros_like(a_mean)
        values[FunctionalId.ACF_MEAN] = np.where(degenerate, zero, a_mean)
        values[FunctionalId.ACF_VARIANCE] = np.where(degenerate, zero, a_var)
        values[FunctionalId.ACF_SKEWNESS] = np.where(degenerate, zero, a_skew)
        values[FunctionalId.ACF_KURTOSIS] = np.where(degenerate, zero, a_kurt)

    out = np.stack([values[i] for i in fset.ids], axis=-2)  # (..., m, C)
    return out.reshape(*out.shape[:-2], -1)


def embed_subset(values: np.ndarray, subset: FunctionalSet, full: FunctionalSet) -> np.ndarray:
    """Place subset values into ``full``'s layout; absent functionals become NaN."""
    channels = values.shape[-1] // subset.m
    src = values.reshape(*values.shape[:-1], subset.m, channels)
    out = np.full((*values.shape[:-1], full.m, channels), np.nan)
    for j, fid in enumerate(subset.ids):
        out[..., full.ids.index(fid), :] = src[..., j, :]
    return out.reshape(*values.shape[:-1], -1)


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    frame_count: int


def fit_normalization(values: np.ndarray) -> NormalizationStats:
    """Per-coordinate mean/std over all frames; ``values`` is ``(..., m*C)``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
    if v.shape[0] < 2:
        raise ValueError(f"need at least 2 frames to fit normalization, got {v.shape[0]}")
    mean = v.mean(axis=0)
    std = np.sqrt(np.mean((v - mean) ** 2, axis=0))
    scale = np.maximum(np.abs(v).max(axis=0), 1.0)
    std = np.where(std <= 1e-12 * scale, 0.0, std)
    return NormalizationStats(mean=mean, std=std, frame_count=v.shape[0])


def apply_normalization(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    std = np.where(stats.std == 0, 1.0, stats.std)
    out = (np.asarray(values, dtype=np.float64) - stats.mean) / std
    return np.where(stats.std == 0, 0.0, out)


# ---------------------------------------------------------------------------
# Functional target store ("PFFN")
#
#   magic b"PFFN" | version u32 | m u32 | C u32 | ids m*u32 | normalized u32
#   | include_lag0 u32 | [mean m*C f64 | std m*C f64 | fit_frames u64]  (if normalized)
#   | n_seq u32 | frames per sequence n_seq*u32 | rows (total_frames, m*C) f32
# All little-endian.
# ---------------------------------------------------------------------------

STORE_MAGIC = b"PFFN"
STORE_VERSION = 1


@dataclass
class FunctionalStore:
    fset: FunctionalSet
    channels: int
    frame_counts: np.ndarray  # frames per sequence
    rows: np.ndarray  # (total_frames, m*C) float32
    stats: Optional[NormalizationStats] = None

    @property
    def normalized(self) -> bool:
        return self.stats is not None

    def sequence(self, i: int) -> np.ndarray:
        offsets = np.concatenate([[0], np.cumsum(self.frame_counts)])
        return self.rows[offsets[i]:offsets[i + 1]]

    def as_array(self) -> np.ndarray:
        """``(num_seq, S, m*C)``; all sequences must have the same frame count."""
        if len(set(self.frame_counts.tolist())) > 1:
            raise ValueError("sequences have differing frame counts")
        return self.rows.reshape(len(self.frame_counts), -1, self.rows.shape[-1])


def write_store(path: Union[str, Path], store: FunctionalStore) -> None:
    m, C = store.fset.m, store.channels
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<III", STORE_VERSION, m, C))
        fh.write(np.asarray([int(i) for i in store.fset.ids], dtype="<u4").tobytes())
        fh.write(struct.pack("<II", int(store.normalized), int(store.fset.include_lag0)))
        if store.stats is not None:
            fh.write(np.asarray(store.stats.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(store.stats.std, dtype="<f8").tobytes())
            fh.write(struct.pack("<Q", store.stats.frame_count))
        fh.write(struct.pack("<I", len(store.frame_counts)))
        fh.write(np.asarray(store.frame_counts, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(store.rows, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"functional store truncated while reading {what}")
    return buf


def read_store(path: Union[str, Path]) -> FunctionalStore:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != STORE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
        version, m, C = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != STORE_VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        ids = np.frombuffer(_read_exact(fh, 4 * m, "functional ids"), dtype="<u4")
        normalized, lag0 = struct.unpack("<II", _read_exact(fh, 8, "flags"))
        stats = None
        if normalized:
            mean = np.frombuffer(_read_exact(fh, 8 * m * C, "mean"), dtype="<f8").copy()
            std = np.frombuffer(_read_exact(fh, 8 * m * C, "std"), dtype="<f8").copy()
            (count,) = struct.unpack("<Q", _read_exact(fh, 8, "fit frame count"))
            stats = NormalizationStats(mean, std, count)
        (n_seq,) = struct.unpack("<I", _read_exact(fh, 4, "sequence count"))
        counts = np.frombuffer(_read_exact(fh, 4 * n_seq, "frame counts"), dtype="<u4").astype(np.int64)
        total = int(counts.sum())
        rows = np.frombuffer(_read_exact(fh, 4 * total * m * C, "rows"), dtype="<f4")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after functional rows")
    fset = FunctionalSet(tuple(FunctionalId(int(i)) for i in ids), include_lag0=bool(lag0))
    return FunctionalStore(fset, C, counts, rows.reshape(total, m * C).copy(), stats)


def precompute_dataset_functionals(
    sequences: Iterable[np.ndarray],
    fset: FunctionalSet = FunctionalSet(),
    normalize: bool = True,
    ids: Optional[Sequence[str]] = None,
) -> FunctionalStore:
    """Functionals for every frame of every framed sequence ``(S, C, N)``.

    Normalization stats are fitted over all frames of all sequences.
    """
    values, counts, channels = [], [], None
    for i, frames in enumerate(sequences):
        name = ids[i] if ids is not None else f"#{i}"
        try:
            frames = np.asarray(frames)
            v = compute_functionals(frames, fset)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"sequence {name}: {exc}") from exc
        if channels is None:
            channels = frames.shape[1]
        elif frames.shape[1] != channels:
            raise ValueError(f"sequence {name}: {frames.shape[1]} channels, expected {channels}")
        values.append(v)
        counts.append(len(v))
    if not values:
        raise ValueError("no sequences to compute functionals for")
    allv = np.concatenate(values)
    stats = None
    if normalize:
        stats = fit_normalization(allv)
        allv = apply_normalization(allv, stats)
    return FunctionalStore(fset, channels, np.asarray(counts, dtype=np.int64),
                           allv.astype(np.float32), stats)
