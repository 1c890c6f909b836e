"""Adam / RAdam updates and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import torch


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _moments_update(grad, state, hyper):
    state["step"] += 1
    state["exp_avg"].mul_(hyper.beta1).add_(grad, alpha=1 - hyper.beta1)
    state["exp_avg_sq"].mul_(hyper.beta2).addcmul_(grad, grad, value=1 - hyper.beta2)
    return state["step"]


def init_state(param: torch.Tensor) -> Dict:
    return {"step": 0, "exp_avg": torch.zeros_like(param), "exp_avg_sq": torch.zeros_like(param)}


@torch.no_grad()
def adam_step(param: torch.Tensor, grad: torch.Tensor, state: Dict, hyper: AdamHyper) -> None:
    """In-place bias-corrected Adam update of ``param``."""
    t = _moments_update(grad, state, hyper)
    bc1 = 1 - hyper.beta1**t
    bc2 = 1 - hyper.beta2**t
    denom = (state["exp_avg_sq"] / bc2).sqrt_().add_(hyper.eps)
    param.addcdiv_(state["exp_avg"], denom, value=-hyper.lr / bc1)


def radam_rectification(t: int, beta2: float) -> Optional[float]:
    """Variance rectification factor at step ``t``; None while the SMA length is <= 4."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return None
    return math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))


@torch.no_grad()
def radam_step(param: torch.Tensor, grad: torch.Tensor, state: Dict, hyper: AdamHyper) -> None:
    """In-place RAdam update; falls back to bias-corrected momentum SGD early on."""
    t = _moments_update(grad, state, hyper)
    bc1 = 1 - hyper.beta1**t
    r = radam_rectification(t, hyper.beta2)
    if r is None:
        param.add_(state["exp_avg"], alpha=-hyper.lr / bc1)
        return
    bc2 = 1 - hyper.beta2**t
    denom = (state["exp_avg_sq"] / bc2).sqrt_().add_(hyper.eps)
    param.addcdiv_(state["exp_avg"], denom, value=-hyper.lr * r / bc1)


class Optimizer:
    """Holds per-parameter state and applies ``adam_step`` or ``radam_step``."""

    def __init__(self, params: Iterable[torch.Tensor], kind: str = "adam", **hyper):
        self.params: List[torch.Tensor] = [p for p in params if p.requires_grad]
        if kind not in ("adam", "radam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.hyper = AdamHyper(**hyper)
        self.state = [init_state(p) for p in self.params]

    @property
    def lr(self) -> float:
        return self.hyper.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.hyper.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        update = adam_step if self.kind == "adam" else radam_step
        for i, p in enumerate(self.params):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {i} {tuple(p.shape)}")
        for p, st in zip(self.params, self.state):
            if p.grad is not None:
                update(p, p.grad, st, self.hyper)


@dataclass
class PlateauSchedule:
    """Halve the learning rate when the validation loss stops improving.

    After ``patience`` consecutive epochs without improvement the rate is
    multiplied by ``factor`` (not below ``min_lr``) and the counter restarts.
    """

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 0.0
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class WarmupPlateauSchedule:
    """Linear warm-up from ``start_ratio * lr`` to ``lr``, then plateau halving.

    ``lr_at(e)`` is the rate for 0-based epoch ``e``; epoch 0 trains at
    ``start_ratio * lr`` and epoch ``warmup_epochs`` reaches ``lr``.
    """

    base_lr: float
    warmup_epochs: int = 20
    start_ratio: float = 0.001
    plateau: PlateauSchedule = field(default=None)

    def __post_init__(self) -> None:
        if self.plateau is None:
            self.plateau = PlateauSchedule(self.base_lr)

    def lr_at(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            frac = epoch / self.warmup_epochs
            return self.base_lr * (self.start_ratio + (1 - self.start_ratio) * frac)
        return self.plateau.lr

    def step(self, epoch: int, val_loss: float) -> float:
        """Record ``val_loss`` for ``epoch`` and return the rate for the next epoch."""
        if epoch + 1 < self.warmup_epochs:
            return self.lr_at(epoch + 1)
        if epoch >= self.warmup_epochs:
            self.plateau.step(val_loss)
        return self.plateau.lr
