"""Binary checkpoint format ("PFCK").

Layout (little-endian)::

    magic b"PFCK" | version u32 | digest 32 bytes (sha256 of the canonical config)
    | meta_len u32 | meta JSON (utf-8)
    | n_tensors u32 | per tensor: name_len u32, name utf-8, ndim u32, shape ndim*u64,
                                  values f32

The JSON metadata carries the canonical config, optimizer step counters and RNG
state; optimizer moment tensors are stored as named tensors under ``optim/``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch

MAGIC = b"PFCK"
VERSION = 1


def config_digest(canonical: str) -> bytes:
    return hashlib.sha256(canonical.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    digest: bytes = b"\0" * 32


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(ckpt.digest)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _take(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return buf


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _take(fh, 4, "magic")
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _take(fh, 4, "version"))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = _take(fh, 32, "config digest")
        (meta_len,) = struct.unpack("<I", _take(fh, 4, "metadata length"))
        meta = json.loads(_take(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _take(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _take(fh, 4, "tensor name length"))
            name = _take(fh, nlen, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _take(fh, 4, f"{name} rank"))
            shape = struct.unpack(f"<{ndim}Q", _take(fh, 8 * ndim, f"{name} shape"))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_take(fh, 4 * size, f"{name} values"), dtype="<f4")
            tensors[name] = data.reshape(shape).copy()
    return Checkpoint(tensors, meta, digest)


def model_tensors(module: torch.nn.Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def load_model_tensors(module: torch.nn.Module, tensors: Dict[str, np.ndarray], prefix: str = "",
                       strict: bool = True) -> None:
    own = module.state_dict()
    picked = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(picked))
    if strict and missing:
        raise ValueError(f"checkpoint lacks parameters {missing[:5]}")
    state = {k: torch.as_tensor(v, dtype=own[k].dtype).reshape(own[k].shape)
             for k, v in picked.items() if k in own}
    module.load_state_dict(state, strict=strict)


def optimizer_tensors(opt, names) -> Dict[str, np.ndarray]:
    out = {}
    for name, st in zip(names, opt.state):
        out[f"optim/{name}/exp_avg"] = st["exp_avg"].detach().cpu().float().numpy()
        out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().float().numpy()
    return out
