"""Glue between files on disk and the in-memory pipeline."""

from __future__ import annotations

import csv
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from pfml import config as cfgmod
from pfml.config import ExperimentConfig
from pfml.finetune import LabeledDataset
from pfml.functionals import FunctionalStore, precompute_dataset_functionals, read_store
from pfml.io import DatasetManifest, load_manifest, load_signals
from pfml.network.checkpoint import (
    Checkpoint,
    config_digest,
    load_model_tensors,
    model_tensors,
    optimizer_tensors,
    read_checkpoint,
    write_checkpoint,
)
from pfml.network.model import Backbone, Classifier
from pfml.pretrain import LOG_HEADER, EpochLog, ModelConfig, PretrainResult
from pfml.timeseries import frames_for_sequences


def load_frames(cfg: ExperimentConfig, manifest_path: Optional[str] = None
                ) -> Tuple[DatasetManifest, np.ndarray]:
    path = cfg.resolve(manifest_path or cfg.data.manifest)
    if path is None:
        raise ValueError("no dataset manifest given (data.manifest)")
    manifest = load_manifest(path)
    signals = load_signals(manifest)
    frames = frames_for_sequences(signals, manifest.frame_config, cfg.data.num_frames,
                                  normalize=cfg.data.znormalize)
    return manifest, frames.astype(np.float32)


def labeled_dataset(manifest: DatasetManifest, frames: np.ndarray) -> LabeledDataset:
    if not manifest.num_classes:
        raise ValueError("manifest has no classes (num_classes = 0)")
    labels = [e.label for e in manifest.entries]
    if any(l is None for l in labels):
        missing = [e.path for e in manifest.entries if e.label is None][:3]
        raise ValueError(f"unlabeled sequences in a labeled task: {missing}")
    groups = np.array([e.group if e.group is not None else e.path for e in manifest.entries])
    labels = np.asarray(labels, dtype=np.int64)
    if manifest.label_level == "frame" and labels.ndim == 2 and labels.shape[1] != frames.shape[1]:
        raise ValueError(f"frame labels cover {labels.shape[1]} frames, sequences have {frames.shape[1]}")
    return LabeledDataset(frames, labels, groups, manifest.num_classes)


def functional_targets(cfg: ExperimentConfig, frames: np.ndarray) -> FunctionalStore:
    fset = cfg.pretrain.functional_set
    if cfg.data.functionals:
        store = read_store(cfg.resolve(cfg.data.functionals))
        if store.fset != fset:
            raise ValueError(f"functional store holds {store.fset.names()}, config asks for {fset.names()}")
        return store
    return precompute_dataset_functionals(list(frames), fset, normalize=True)


# ---------------------------------------------------------------------------
# checkpoints


def _model_meta(model_cfg: ModelConfig) -> dict:
    return cfgmod._plain(model_cfg)


def save_pretrain_checkpoint(path, cfg: ExperimentConfig, result: PretrainResult, channels: int,
                             frame_len: int, store: Optional[FunctionalStore]) -> None:
    model = result.model
    tensors = model_tensors(model, "model/")
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    tensors.update(optimizer_tensors(result.optimizer, names))
    meta = {
        "kind": "pretrain",
        "config": cfgmod.to_dict(cfg),
        "model": _model_meta(cfg.model),
        "channels": channels,
        "frame_len": frame_len,
        "target_dim": int(model.head.out_features),
        "objective": cfg.pretrain.objective,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "optimizer": {"kind": result.optimizer.kind, "lr": result.optimizer.lr,
                      "steps": [st["step"] for st in result.optimizer.state]},
        "rng": {"seed": cfg.seed, "next_epoch": len(result.log)},
    }
    if store is not None and store.stats is not None:
        meta["normalization"] = {"mean": store.stats.mean.tolist(), "std": store.stats.std.tolist(),
                                 "frame_count": store.stats.frame_count}
    write_checkpoint(path, Checkpoint(tensors, meta, config_digest(cfgmod.canonical(cfg))))


def backbone_from_checkpoint(path) -> Tuple[Backbone, dict]:
    """Backbone weights from a pre-training or classifier checkpoint."""
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    model_cfg = cfgmod.model_config_from_dict(meta["model"])
    # built without a mask config: a learnable mask token is not needed downstream
    backbone = Backbone(meta["channels"], meta["frame_len"], model_cfg.encoder, model_cfg.transformer)
    load_model_tensors(backbone, ckpt.tensors, "model/backbone.")
    return backbone, meta


def random_backbone(cfg: ExperimentConfig, channels: int, frame_len: int, seed_stream: int = 0) -> Backbone:
    torch.manual_seed(int(np.random.SeedSequence([cfg.seed, 31, seed_stream]).generate_state(1)[0]))
    return Backbone(channels, frame_len, cfg.model.encoder, cfg.model.transformer)


def save_classifier_checkpoint(path, cfg: ExperimentConfig, model: Classifier, channels: int,
                               frame_len: int, extra: Optional[dict] = None) -> None:
    meta = {
        "kind": "classifier",
        "config": cfgmod.to_dict(cfg),
        "model": _model_meta(cfg.model),
        "channels": channels,
        "frame_len": frame_len,
        "num_classes": model.head.num_classes,
        "hidden": cfg.finetune.hidden,
        "pooling": model.pooling,
        **(extra or {}),
    }
    write_checkpoint(path, Checkpoint(model_tensors(model, "model/"), meta,
                                      config_digest(cfgmod.canonical(cfg))))


def classifier_from_checkpoint(path) -> Classifier:
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint (kind {meta.get('kind')!r})")
    model_cfg = cfgmod.model_config_from_dict(meta["model"])
    backbone = Backbone(meta["channels"], meta["frame_len"], model_cfg.encoder, model_cfg.transformer)
    model = Classifier(backbone, meta["num_classes"], meta["hidden"], meta["pooling"])
    load_model_tensors(model, ckpt.tensors, "model/")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# CSV outputs


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in LOG_HEADER])


def read_log(path) -> List[EpochLog]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LOG_HEADER)}")
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                         float(r["emb_var"]), float(r["out_var"]), float(r["lr"]),
                         bool(int(r["collapse_flag"]))) for r in reader]


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_confusion(path, cm: np.ndarray) -> None:
    k = len(cm)
    write_csv(path, ["true\\pred"] + [str(j) for j in range(k)],
              [[i] + [int(v) for v in cm[i]] for i in range(k)])
