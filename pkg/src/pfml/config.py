"""JSON experiment configs: strict parsing, canonical form and digest."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pfml.finetune import FinetuneConfig, ProbeConfig
from pfml.masking import MaskConfig
from pfml.network.layers import ENCODER_PRESETS, ConvLayer, EncoderConfig, TransformerConfig
from pfml.pretrain import ModelConfig, PretrainConfig
from pfml.synth import PRESETS, SyntheticSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    manifest: Optional[str] = None
    znormalize: bool = False
    num_frames: Optional[int] = None  # pad/truncate every sequence to this many frames
    functionals: Optional[str] = None  # precomputed PFFN store; computed on the fly if absent


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: Optional[str] = None
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    probe: ProbeConfig = ProbeConfig()
    eval: EvalConfig = EvalConfig()
    synth: SyntheticSpec = PRESETS["labeled"]
    # optional checkpoints consumed by finetune / probe (null: random init)
    checkpoint: Optional[str] = None
    base_dir: str = field(default=".", compare=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self, seed=seed,
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            finetune=dataclasses.replace(self.finetune, seed=seed),
            probe=dataclasses.replace(self.probe, seed=seed),
            synth=dataclasses.replace(self.synth, seed=seed),
        )

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _build(cls, raw: Any, where: str, skip=("seed",), **extra):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip) - set(extra)
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _encoder(raw, where) -> EncoderConfig:
    if isinstance(raw, str):
        if raw not in ENCODER_PRESETS:
            raise ConfigError(f"{where}: unknown encoder preset {raw!r} (have {sorted(ENCODER_PRESETS)})")
        return ENCODER_PRESETS[raw]
    raw = dict(raw)
    layers = raw.pop("layers", None)
    if not layers:
        raise ConfigError(f"{where}: encoder needs 'layers'")
    built = tuple(_build(ConvLayer, l, f"{where}.layers[{i}]", skip=()) for i, l in enumerate(layers))
    return _build(EncoderConfig, raw, where, skip=(), layers=built)


def parse_config(raw: Dict[str, Any], base_dir: Union[str, Path] = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(map(repr, unknown))}")
    if "seed" not in raw:
        raise ConfigError("config: 'seed' is required")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"config: seed must be a non-negative integer, got {seed!r}")

    kw: Dict[str, Any] = {"seed": seed, "base_dir": str(base_dir)}
    if "data" in raw:
        kw["data"] = _build(DataConfig, raw["data"], "data", skip=())
    if "model" in raw:
        m = raw["model"]
        if not isinstance(m, dict):
            raise ConfigError("model: expected an object")
        unknown = sorted(set(m) - {"encoder", "transformer"})
        if unknown:
            raise ConfigError(f"model: unknown key(s) {', '.join(map(repr, unknown))}")
        enc = _encoder(m["encoder"], "model.encoder") if "encoder" in m else ModelConfig().encoder
        tr = (_build(TransformerConfig, m["transformer"], "model.transformer", skip=())
              if "transformer" in m else ModelConfig().transformer)
        kw["model"] = ModelConfig(enc, tr)
    if "pretrain" in raw:
        p = dict(raw["pretrain"]) if isinstance(raw["pretrain"], dict) else raw["pretrain"]
        extra = {}
        if isinstance(p, dict) and "mask" in p:
            extra["mask"] = _build(MaskConfig, p.pop("mask"), "pretrain.mask", skip=())
        if isinstance(p, dict) and "functionals" in p:
            p["functionals"] = tuple(p["functionals"])
        kw["pretrain"] = _build(PretrainConfig, p, "pretrain", seed=seed, **extra)
    else:
        kw["pretrain"] = PretrainConfig(seed=seed)
    for name, cls in (("finetune", FinetuneConfig), ("probe", ProbeConfig)):
        if name in raw:
            sec = dict(raw[name]) if isinstance(raw[name], dict) else raw[name]
            if isinstance(sec, dict) and sec.get("sensor_groups") is not None:
                sec["sensor_groups"] = tuple(tuple(g) for g in sec["sensor_groups"])
            kw[name] = _build(cls, sec, name, seed=seed)
        else:
            kw[name] = cls(seed=seed)
    if "eval" in raw:
        kw["eval"] = _build(EvalConfig, raw["eval"], "eval", skip=())
    if "synth" in raw:
        s = dict(raw["synth"]) if isinstance(raw["synth"], dict) else raw["synth"]
        base = PRESETS["labeled"]
        if isinstance(s, dict) and "preset" in s:
            name = s.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"synth: unknown preset {name!r} (have {sorted(PRESETS)})")
            base = PRESETS[name]
        if not isinstance(s, dict):
            raise ConfigError("synth: expected an object")
        merged = {**dataclasses.asdict(base), **s}
        merged.pop("seed")
        kw["synth"] = _build(SyntheticSpec, merged, "synth", seed=seed)
    else:
        kw["synth"] = dataclasses.replace(PRESETS["labeled"], seed=seed)
    if "checkpoint" in raw:
        kw["checkpoint"] = raw["checkpoint"]
    return ExperimentConfig(**kw)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(raw, path.parent)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.name != "base_dir"}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-JSON view of a config; ``parse_config(to_dict(c))`` rebuilds ``c``."""
    d = _plain(cfg)
    for name in ("pretrain", "finetune", "probe", "synth"):
        d[name].pop("seed")
    return d


def canonical(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def model_config_from_dict(d: dict) -> ModelConfig:
    enc = dict(d["encoder"])
    layers = tuple(ConvLayer(**l) for l in enc.pop("layers"))
    return ModelConfig(EncoderConfig(layers, **enc), TransformerConfig(**d["transformer"]))
