"""PFML / MAE pre-training: masked loss, collapse monitoring and the training loop."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from pfml.functionals import ALL_FUNCTIONALS, FunctionalSet
from pfml.masking import MaskConfig, sample_batch_masks, sequence_rng
from pfml.network.layers import ENCODER_PRESETS, EncoderConfig, TransformerConfig
from pfml.network.model import Backbone, PretrainModel
from pfml.network.optim import Optimizer, PlateauSchedule

log = logging.getLogger(__name__)

# Named random streams; masks use (seed, MASK_STREAM + epoch, sequence).
INIT_STREAM, DROPOUT_STREAM, SPLIT_STREAM, SHUFFLE_STREAM, NOISE_STREAM = 1, 2, 3, 4, 5
VAL_MASK_STREAM = 100
TRAIN_MASK_STREAM = 1000


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = ENCODER_PRESETS["tiny"]
    transformer: TransformerConfig = TransformerConfig(num_blocks=2, dim=32, heads=4, ff_dim=64,
                                                       dropout=0.0, pos_kernel=5, pos_groups=4)


@dataclass(frozen=True)
class PretrainConfig:
    objective: str = "pfml"
    loss_type: str = "mse"
    mask: MaskConfig = MaskConfig()
    functionals: tuple = tuple(f.name.lower() for f in ALL_FUNCTIONALS)
    include_lag0: bool = False
    epochs: int = 30
    batch_size: int = 4
    lr: float = 3e-3
    split: float = 0.8
    patience: int = 5
    min_lr_ratio: float = 1 / 64
    collapse_threshold: float = 0.01
    collapse_window: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.objective not in ("pfml", "mae"):
            raise ValueError(f"objective must be 'pfml' or 'mae', got {self.objective!r}")
        if self.loss_type not in ("mse", "l1"):
            raise ValueError(f"loss_type must be 'mse' or 'l1', got {self.loss_type!r}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must be in (0, 1), got {self.split}")
        if self.objective == "pfml" and not self.functionals:
            raise ValueError("pfml objective needs a functional set")

    @property
    def functional_set(self) -> FunctionalSet:
        return FunctionalSet(tuple(self.functionals), include_lag0=self.include_lag0)


def masked_prediction_loss(pred: torch.Tensor, targets: torch.Tensor, masked, loss_type: str = "mse"
                           ) -> torch.Tensor:
    """Mean squared (or absolute) error over masked frames and all target coordinates.

    Unmasked frames are dropped before any arithmetic, so their values cannot
    affect the result.
    """
    masked = torch.as_tensor(np.asarray(masked), dtype=torch.bool, device=pred.device)
    if masked.shape != pred.shape[:-1] or pred.shape != targets.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, targets "
                         f"{tuple(targets.shape)}, mask {tuple(masked.shape)}")
    if not masked.any():
        raise ValueError("loss needs at least one masked frame")
    diff = pred[masked] - targets[masked]
    if loss_type == "mse":
        return (diff * diff).mean()
    if loss_type == "l1":
        return diff.abs().mean()
    raise ValueError(f"unknown loss_type {loss_type!r}")


def mae_targets(frames: np.ndarray) -> np.ndarray:
    """Flatten ``(..., C, N)`` frames into ``(..., C*N)`` reconstruction targets."""
    frames = np.asarray(frames)
    return frames.reshape(*frames.shape[:-2], frames.shape[-2] * frames.shape[-1])


def unflatten_targets(targets: np.ndarray, channels: int) -> np.ndarray:
    targets = np.asarray(targets)
    return targets.reshape(*targets.shape[:-1], channels, targets.shape[-1] // channels)


def across_frame_variance(x: torch.Tensor) -> float:
    """Population variance across all frames per coordinate, averaged over coordinates."""
    flat = x.detach().reshape(-1, x.shape[-1]).double()
    if flat.shape[0] < 2:
        return 0.0
    return float(flat.var(dim=0, unbiased=False).mean())


@dataclass
class CollapseStatus:
    collapsed: bool
    run_length: int
    margin: float  # min(emb_var, out_var) - threshold


@dataclass
class CollapseMonitor:
    """Flags collapse when embedding or output variance stays below ``threshold``
    for ``window`` consecutive epochs while the validation loss keeps decreasing.

    The first recorded epoch counts as decreasing (no earlier loss to compare).
    """

    threshold: float = 0.01
    window: int = 10
    history: List[tuple] = field(default_factory=list)
    run_length: int = 0

    def update(self, emb_var: float, out_var: float, val_loss: float) -> CollapseStatus:
        prev = self.history[-1][2] if self.history else math.inf
        self.history.append((emb_var, out_var, val_loss))
        low = min(emb_var, out_var) < self.threshold
        decreasing = val_loss < prev
        self.run_length = self.run_length + 1 if (low and decreasing) else 0
        return CollapseStatus(self.run_length >= self.window, self.run_length,
                              min(emb_var, out_var) - self.threshold)


def collapse_check(monitor: CollapseMonitor, emb_var: float, out_var: float, val_loss: float
                   ) -> CollapseStatus:
    return monitor.update(emb_var, out_var, val_loss)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    emb_var: float
    out_var: float
    lr: float
    collapse_flag: bool


LOG_HEADER = ["epoch", "train_loss", "val_loss", "emb_var", "out_var", "lr", "collapse_flag"]


@dataclass
class PretrainResult:
    model: PretrainModel
    log: List[EpochLog]
    best_epoch: int
    best_val_loss: float
    masked_out_var: float  # across-frame prediction variance at masked validation frames
    collapse_epochs: List[int]
    mask_digests: List[str]
    optimizer: Optimizer
    train_idx: np.ndarray
    val_idx: np.ndarray


def split_indices(n: int, ratio: float, seed: int, stream: int = SPLIT_STREAM):
    """Seeded random ``ratio`` : ``1 - ratio`` split of ``range(n)``."""
    if n < 2:
        raise ValueError(f"need at least 2 sequences to split, got {n}")
    perm = sequence_rng(seed, stream).permutation(n)
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _torch_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_pretrain_model(channels: int, frame_len: int, target_dim: int, model_cfg: ModelConfig,
                         mask_cfg: Optional[MaskConfig], seed: int) -> PretrainModel:
    torch.manual_seed(_torch_seed(seed, INIT_STREAM))
    backbone = Backbone(channels, frame_len, model_cfg.encoder, model_cfg.transformer, mask_cfg)
    return PretrainModel(backbone, target_dim)


def _run_epoch(model, frames, targets, idx, cfg, masks, opt=None, noise_rng=None):
    """One pass over ``idx``; trains when ``opt`` is given. Returns loss and variances."""
    total, count = 0.0, 0
    emb_vars, out_vars = [], []
    masked_preds = []
    for b in range(0, len(idx), cfg.batch_size):
        batch = idx[b:b + cfg.batch_size]
        x = torch.as_tensor(frames[batch])
        t = torch.as_tensor(targets[batch])
        m = masks[b:b + cfg.batch_size]
        if opt is not None:
            out = model(x, m, noise_rng)
            loss = masked_prediction_loss(out["pred"], t, m, cfg.loss_type)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss in batch starting at {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        else:
            with torch.no_grad():
                out = model(x, m, noise_rng)
                loss = masked_prediction_loss(out["pred"], t, m, cfg.loss_type)
            emb_vars.append(across_frame_variance(out["z"]))
            out_vars.append(across_frame_variance(out["y"]))
            masked_preds.append(out["pred"][torch.as_tensor(m)])
        n = int(m.sum()) * t.shape[-1]
        total += loss.item() * n
        count += n
    stats = {"loss": total / count}
    if opt is None:
        stats["emb_var"] = float(np.mean(emb_vars))
        stats["out_var"] = float(np.mean(out_vars))
        stats["masked_out_var"] = across_frame_variance(torch.cat(masked_preds))
    return stats


def pretrain(
    frames: np.ndarray,
    targets: Optional[np.ndarray],
    cfg: PretrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    epoch_callback=None,
) -> PretrainResult:
    """Pre-train on ``frames`` ``(num_seq, S, C, N)``.

    ``targets`` are the normalized functionals ``(num_seq, S, m*C)`` for PFML and
    are ignored for MAE, which reconstructs the frames themselves. Returns the
    model restored to its lowest-validation-loss epoch.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    n_seq, S, C, N = frames.shape
    if cfg.objective == "mae":
        targets = mae_targets(frames)
    elif targets is None:
        raise ValueError("pfml objective needs precomputed functional targets")
    targets = np.ascontiguousarray(targets, dtype=np.float32)
    if targets.shape[:2] != (n_seq, S):
        raise ValueError(f"targets shape {targets.shape} does not match frames {frames.shape}")

    train_idx, val_idx = split_indices(n_seq, cfg.split, cfg.seed)
    model = build_pretrain_model(C, N, targets.shape[-1], model_cfg, cfg.mask, cfg.seed)
    torch.manual_seed(_torch_seed(cfg.seed, DROPOUT_STREAM))
    opt = Optimizer(model.parameters(), "radam", lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, factor=0.5, patience=cfg.patience, min_lr=cfg.lr * cfg.min_lr_ratio)
    monitor = CollapseMonitor(cfg.collapse_threshold, cfg.collapse_window)
    val_masks = sample_batch_masks(S, cfg.mask, cfg.seed, VAL_MASK_STREAM, val_idx)

    history: List[EpochLog] = []
    digests, collapse_epochs = [], []
    best = (math.inf, -1, None, 0.0)
    for epoch in range(cfg.epochs):
        order = train_idx[sequence_rng(cfg.seed, SHUFFLE_STREAM, epoch).permutation(len(train_idx))]
        masks = sample_batch_masks(S, cfg.mask, cfg.seed, TRAIN_MASK_STREAM + epoch, order)
        digests.append(hashlib.sha256(np.packbits(masks).tobytes()).hexdigest()[:16])
        noise = sequence_rng(cfg.seed, NOISE_STREAM, epoch)

        lr = opt.lr
        model.train()
        train = _run_epoch(model, frames, targets, order, cfg, masks, opt, noise)
        model.eval()
        val = _run_epoch(model, frames, targets, val_idx, cfg, val_masks, None,
                         sequence_rng(cfg.seed, NOISE_STREAM, 10**6))
        status = collapse_check(monitor, val["emb_var"], val["out_var"], val["loss"])
        if status.collapsed:
            collapse_epochs.append(epoch)
            log.warning("collapse criterion met at epoch %d (margin %.4g)", epoch, status.margin)
        row = EpochLog(epoch, train["loss"], val["loss"], val["emb_var"], val["out_var"], lr,
                       status.collapsed)
        history.append(row)
        if val["loss"] < best[0]:
            best = (val["loss"], epoch, copy.deepcopy(model.state_dict()), val["masked_out_var"])
        opt.lr = sched.step(val["loss"])
        log.info("epoch %d train %.4f val %.4f emb_var %.4f out_var %.4f lr %.3g", epoch,
                 row.train_loss, row.val_loss, row.emb_var, row.out_var, lr)
        if epoch_callback is not None:
            epoch_callback(row)

    model.load_state_dict(best[2])
    model.eval()
    return PretrainResult(model, history, best[1], best[0], best[3], collapse_epochs, digests, opt,
                          train_idx, val_idx)
