"""Supervised fine-tuning, linear probing, metrics and grouped cross-validation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from pfml.masking import sequence_rng
from pfml.network.model import Backbone, Classifier, backbone_parameters
from pfml.network.optim import Optimizer, PlateauSchedule, WarmupPlateauSchedule

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    frames: np.ndarray  # (n, S, C, N)
    labels: np.ndarray  # (n,) sequence labels or (n, S) frame labels
    groups: np.ndarray  # (n,)
    num_classes: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups)
        n = len(self.frames)
        if len(self.labels) != n or len(self.groups) != n:
            raise ValueError("frames, labels and groups must have the same length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def frame_level(self) -> bool:
        return self.labels.ndim == 2

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.frames[idx], self.labels[idx], self.groups[idx], self.num_classes)


@dataclass(frozen=True)
class FinetuneConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 64
    patience: int = 5
    warmup_epochs: int = 20
    criterion: str = "uaf1"  # or "uar"
    pooling: str = "mean"  # "frame" for per-frame labels
    sensor_dropout: float = 0.0
    sensor_groups: Optional[tuple] = None
    folds: int = 10
    val_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.criterion not in ("uaf1", "uar"):
            raise ValueError(f"criterion must be 'uaf1' or 'uar', got {self.criterion!r}")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-2
    patience: int = 10
    criterion: str = "uar"
    pooling: str = "mean"
    folds: int = 5
    val_ratio: float = 0.2
    seed: int = 0


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise ValueError("confusion matrix must be square and non-empty")
    return cm


def uar(cm) -> float:
    """Unweighted average recall; classes without true samples count as recall 0."""
    cm = _check_cm(cm).astype(np.float64)
    support = cm.sum(axis=1)
    recall = np.divide(np.diag(cm), support, out=np.zeros(len(cm)), where=support > 0)
    return float(recall.mean())


def uaf1(cm) -> float:
    """Unweighted average F1; a class with an undefined F1 scores 0."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(len(cm)), where=denom > 0)
    return float(f1.mean())


METRICS = {"uaf1": uaf1, "uar": uar}


# ---------------------------------------------------------------------------
# losses and augmentation


def class_weights(class_counts) -> np.ndarray:
    """Inverse-frequency weights normalized to sum to one."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError(f"class counts must be positive, got {counts.tolist()}")
    w = 1.0 / counts
    return w / w.sum()


def weighted_ce(probs: torch.Tensor, labels: torch.Tensor, class_counts, from_logits: bool = False
                ) -> torch.Tensor:
    """Cross-entropy where each sample is weighted by its class' inverse frequency.

    Returns sum_i w_{y_i} * nll_i / sum_i w_{y_i}.
    """
    w = torch.as_tensor(class_weights(class_counts), dtype=probs.dtype, device=probs.device)
    if from_logits:
        logp = F.log_softmax(probs, dim=-1)
    else:
        logp = torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))
    logp = logp.reshape(-1, logp.shape[-1])
    labels = torch.as_tensor(labels).reshape(-1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    sw = w[labels]
    return (sw * nll).sum() / sw.sum()


def channel_dropout(frames: np.ndarray, p: float, rng: np.random.Generator,
                    sensor_groups: Optional[Sequence[Sequence[int]]] = None) -> np.ndarray:
    """Zero each sensor's channel group independently with probability ``p``.

    ``frames`` is ``(B, S, C, N)``; one draw per item and sensor. Without
    ``sensor_groups`` every channel is its own sensor.
    """
    frames = np.asarray(frames)
    C = frames.shape[-2]
    groups = sensor_groups or [[c] for c in range(C)]
    drop = rng.random((frames.shape[0], len(groups))) < p
    keep = np.ones((frames.shape[0], C), dtype=frames.dtype)
    for g, chans in enumerate(groups):
        keep[np.ix_(drop[:, g], list(chans))] = 0
    return frames * keep[:, None, :, None]


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class Fold:
    index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_groups(groups: np.ndarray, idx: np.ndarray, val_ratio: float, rng: np.random.Generator):
    """Split item indices ``idx`` into train/val by group."""
    ug = np.unique(groups[idx])
    rng.shuffle(ug)
    n_val = max(1, int(round(val_ratio * len(ug)))) if len(ug) > 1 else 0
    val_groups = set(ug[:n_val].tolist())
    is_val = np.array([g in val_groups for g in groups[idx]], dtype=bool)
    return idx[~is_val], idx[is_val]


def grouped_kfold(groups, k: int = 10, seed: int = 0, val_ratio: float = 0.2) -> List[Fold]:
    """Each group lands in exactly one test fold; the remainder splits 80:20 by group."""
    groups = np.asarray(groups)
    ug = np.unique(groups)
    if len(ug) < k:
        raise ValueError(f"need at least {k} groups for {k}-fold CV, got {len(ug)}")
    rng = sequence_rng(seed, 7)
    order = ug[rng.permutation(len(ug))]
    assignment = {g: i % k for i, g in enumerate(order)}
    fold_of = np.array([assignment[g] for g in groups])
    folds = []
    all_idx = np.arange(len(groups))
    for f in range(k):
        test = all_idx[fold_of == f]
        rest = all_idx[fold_of != f]
        train, val = split_groups(groups, rest, val_ratio, sequence_rng(seed, 8, f))
        folds.append(Fold(f, train, val, test))
    return folds


def aggregate_eval(cms: Sequence[np.ndarray]) -> np.ndarray:
    return np.sum(np.stack([np.asarray(c) for c in cms]), axis=0)


# ---------------------------------------------------------------------------
# training


def _counts(labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels).ravel(), minlength=k)
    if np.any(counts == 0):
        # absent classes still need a finite weight
        counts = np.maximum(counts, 1)
    return counts


def predict(model: Classifier, frames: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for b in range(0, len(frames), batch_size):
            out.append(model(torch.as_tensor(frames[b:b + batch_size])).argmax(-1).numpy())
    return np.concatenate(out)


def evaluate(model: Classifier, data: LabeledDataset, batch_size: int = 32) -> np.ndarray:
    return confusion_matrix(data.labels, predict(model, data.frames, batch_size), data.num_classes)


def _val_loss(model, data: LabeledDataset, counts, batch_size) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for b in range(0, len(data.frames), batch_size):
            logits = model(torch.as_tensor(data.frames[b:b + batch_size]))
            lab = torch.as_tensor(data.labels[b:b + batch_size])
            total += float(weighted_ce(logits, lab, counts, from_logits=True)) * lab.numel()
            n += lab.numel()
    return total / n


@dataclass
class TrainHistory:
    val_metric: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    best_epoch: int = -1


def _train_classifier(model: Classifier, train: LabeledDataset, val: LabeledDataset, cfg: FinetuneConfig,
                      epochs: int, params, schedule, seed_stream: int, freeze_backbone: bool
                      ) -> TrainHistory:
    counts = _counts(train.labels, train.num_classes)
    opt = Optimizer(params, "adam", lr=schedule.lr_at(0) if hasattr(schedule, "lr_at") else schedule.lr)
    metric = METRICS[cfg.criterion]
    hist = TrainHistory()
    best_state, best_score = None, -math.inf
    for epoch in range(epochs):
        rng = sequence_rng(cfg.seed, seed_stream, epoch)
        model.train()
        if freeze_backbone:
            model.backbone.eval()
        order = rng.permutation(len(train.frames))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            x = train.frames[idx]
            if cfg.sensor_dropout > 0:
                x = channel_dropout(x, cfg.sensor_dropout, rng, cfg.sensor_groups)
            logits = model(torch.as_tensor(x))
            loss = weighted_ce(logits, torch.as_tensor(train.labels[idx]), counts, from_logits=True)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        score = metric(evaluate(model, val, cfg.batch_size))
        vloss = _val_loss(model, val, counts, cfg.batch_size)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_metric.append(score)
        hist.val_loss.append(vloss)
        hist.lr.append(opt.lr)
        if score > best_score:
            best_score, best_state, hist.best_epoch = score, copy.deepcopy(model.state_dict()), epoch
        opt.lr = schedule.step(epoch, vloss) if hasattr(schedule, "lr_at") else schedule.step(vloss)
    model.load_state_dict(best_state)
    return hist


def finetune_stage1(model: Classifier, train: LabeledDataset, val: LabeledDataset, cfg: FinetuneConfig
                    ) -> TrainHistory:
    """Train only the classification head; the backbone stays bit-identical."""
    if train.num_classes != model.head.num_classes:
        raise ValueError(f"dataset has {train.num_classes} classes, head outputs {model.head.num_classes}")
    for p in backbone_parameters(model):
        p.requires_grad_(False)
    try:
        sched = PlateauSchedule(cfg.lr, patience=cfg.patience)
        return _train_classifier(model, train, val, cfg, cfg.stage1_epochs, model.head.parameters(),
                                 sched, 11, freeze_backbone=True)
    finally:
        for p in backbone_parameters(model):
            p.requires_grad_(True)


def finetune_stage2(model: Classifier, train: LabeledDataset, val: LabeledDataset, cfg: FinetuneConfig,
                    warmup: bool = True) -> TrainHistory:
    """Train everything; with ``warmup`` the rate ramps from 0.001*lr to lr first."""
    if warmup:
        sched = WarmupPlateauSchedule(cfg.lr, cfg.warmup_epochs,
                                      plateau=PlateauSchedule(cfg.lr, patience=cfg.patience))
    else:
        sched = PlateauSchedule(cfg.lr, patience=cfg.patience)
    return _train_classifier(model, train, val, cfg, cfg.stage2_epochs, model.parameters(), sched, 12,
                             freeze_backbone=False)


def finetune(backbone: Backbone, train: LabeledDataset, val: LabeledDataset, cfg: FinetuneConfig,
             pretrained: bool = True) -> Classifier:
    """Two-stage fine-tuning; without pre-training stage 1 and the warm-up are skipped."""
    torch.manual_seed(int(np.random.SeedSequence([cfg.seed, 13]).generate_state(1)[0]))
    model = Classifier(backbone, train.num_classes, cfg.hidden, cfg.pooling)
    if pretrained:
        finetune_stage1(model, train, val, cfg)
    finetune_stage2(model, train, val, cfg, warmup=pretrained)
    return model


# ---------------------------------------------------------------------------
# linear probe


def extract_features(backbone: Backbone, frames: np.ndarray, pooling: str = "mean",
                     batch_size: int = 32) -> np.ndarray:
    backbone.eval()
    out = []
    with torch.no_grad():
        for b in range(0, len(frames), batch_size):
            y = backbone(torch.as_tensor(frames[b:b + batch_size]))["y"]
            out.append((y.mean(dim=1) if pooling == "mean" else y).numpy())
    return np.concatenate(out)


@dataclass
class ProbeResult:
    cm: np.ndarray
    uar: float
    uaf1: float
    best_epoch: int


def train_probe(feats_train, y_train, feats_val, y_val, num_classes: int, cfg: ProbeConfig
                ) -> torch.nn.Linear:
    """Linear softmax classifier on frozen features, selected by validation metric."""
    torch.manual_seed(int(np.random.SeedSequence([cfg.seed, 21]).generate_state(1)[0]))
    dim = feats_train.shape[-1]
    layer = torch.nn.Linear(dim, num_classes)
    torch.nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04)
    torch.nn.init.zeros_(layer.bias)
    counts = _counts(y_train, num_classes)
    opt = Optimizer(layer.parameters(), "adam", lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, patience=cfg.patience)
    xt, yt = torch.as_tensor(feats_train), torch.as_tensor(y_train)
    xv = torch.as_tensor(feats_val)
    metric = METRICS[cfg.criterion]
    best, best_state = -math.inf, None
    for epoch in range(cfg.epochs):
        order = sequence_rng(cfg.seed, 22, epoch).permutation(len(xt))
        for b in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[b:b + cfg.batch_size])
            loss = weighted_ce(layer(xt[idx]), yt[idx], counts, from_logits=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            logits = layer(xv)
            vloss = float(weighted_ce(logits, torch.as_tensor(y_val), counts, from_logits=True))
            score = metric(confusion_matrix(y_val, logits.argmax(-1).numpy(), num_classes))
        if score > best:
            best, best_state = score, copy.deepcopy(layer.state_dict())
        opt.lr = sched.step(vloss)
    layer.load_state_dict(best_state)
    return layer


def linear_probe(backbone: Backbone, data: LabeledDataset, cfg: ProbeConfig = ProbeConfig(),
                 folds: Optional[List[Fold]] = None) -> ProbeResult:
    """Grouped cross-validated linear probe on frozen backbone features.

    The backbone is never modified; features are extracted once in eval mode.
    """
    feats = extract_features(backbone, data.frames, cfg.pooling)
    if folds is None:
        folds = grouped_kfold(data.groups, cfg.folds, cfg.seed, cfg.val_ratio)
    cms = []
    for fold in folds:
        layer = train_probe(feats[fold.train], data.labels[fold.train], feats[fold.val],
                            data.labels[fold.val], data.num_classes, cfg)
        with torch.no_grad():
            pred = layer(torch.as_tensor(feats[fold.test])).argmax(-1).numpy()
        cms.append(confusion_matrix(data.labels[fold.test], pred, data.num_classes))
    cm = aggregate_eval(cms)
    return ProbeResult(cm, uar(cm), uaf1(cm), -1)


def cross_validate(make_backbone: Callable[[], Backbone], data: LabeledDataset, cfg: FinetuneConfig,
                   pretrained: bool = True, fold_callback=None):
    """Grouped k-fold fine-tuning. Returns per-fold confusion matrices and the aggregate."""
    folds = grouped_kfold(data.groups, cfg.folds, cfg.seed, cfg.val_ratio)
    cms = []
    for fold in folds:
        model = finetune(make_backbone(), data.subset(fold.train), data.subset(fold.val), cfg, pretrained)
        cm = evaluate(model, data.subset(fold.test), cfg.batch_size)
        cms.append(cm)
        if fold_callback is not None:
            fold_callback(fold, model, cm)
    return cms, aggregate_eval(cms)
