"""Sequence files ("PFTS"), CSV import and dataset manifests.

PFTS layout, little-endian::

    magic b"PFTS" | version u32 | channels u32 | sample_rate f64 | length u64
    | samples: length * channels f32, sample-major (channels interleaved)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from pfml.timeseries import FrameConfig, Signal

SEQ_MAGIC = b"PFTS"
SEQ_VERSION = 1
_HEADER = struct.Struct("<4sIIdQ")


def write_sequence(path: Union[str, Path], signal: Signal) -> None:
    data = np.ascontiguousarray(signal.data.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, signal.channels, float(signal.sample_rate),
                              signal.length))
        fh.write(data.tobytes())


def read_sequence(path: Union[str, Path]) -> Signal:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, channels, rate, length = _HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {SEQ_MAGIC!r}")
    if version != SEQ_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * channels * length
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {channels}x{length} samples, "
                         f"found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(length, channels)
    return Signal(data.T.astype(np.float32), rate)


def read_csv_sequence(path: Union[str, Path], sample_rate: float) -> Signal:
    """One row per sample, one column per channel; a non-numeric header row is skipped."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(v) for v in first.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, dtype=np.float64)
    return Signal(data.T, sample_rate)


@dataclass
class ManifestEntry:
    path: str
    label: Optional[Union[int, List[int]]] = None
    group: Optional[str] = None


@dataclass
class DatasetManifest:
    channels: int
    sample_rate: float
    frame_len: int
    hop: int
    entries: List[ManifestEntry]
    task: str = "unlabeled"
    num_classes: int = 0
    label_level: str = "sequence"  # or "frame"
    sensor_groups: Optional[List[List[int]]] = None
    root: Path = field(default=Path("."), repr=False, compare=False)

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.frame_len, self.hop)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d


_MANIFEST_KEYS = {"channels", "sample_rate", "frame_len", "hop", "entries", "task", "num_classes",
                  "label_level", "sensor_groups"}


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    d = json.loads(path.read_text())
    unknown = sorted(set(d) - _MANIFEST_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown manifest key(s) {unknown}")
    entries = [ManifestEntry(**e) for e in d.pop("entries")]
    m = DatasetManifest(entries=entries, root=path.parent, **d)
    for e in m.entries:
        p = m.root / e.path
        if not p.exists():
            raise FileNotFoundError(f"{path}: sequence file {e.path} does not exist")
    return m


def save_manifest(path: Union[str, Path], manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def load_signals(manifest: DatasetManifest) -> List[Signal]:
    out = []
    for e in manifest.entries:
        p = manifest.root / e.path
        try:
            sig = read_sequence(p) if p.suffix != ".csv" else read_csv_sequence(p, manifest.sample_rate)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"sequence {e.path}: {exc}") from exc
        if sig.channels != manifest.channels:
            raise ValueError(f"sequence {e.path}: {sig.channels} channels, manifest says "
                             f"{manifest.channels}")
        out.append(sig)
    return out
