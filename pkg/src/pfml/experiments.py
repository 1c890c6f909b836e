"""Desk-scale studies on the synthetic presets: collapse monitoring and probe comparisons.

The pre-training data (``unlabeled`` preset) and the probing data (``labeled``
preset) stay fixed; only the training seed varies between runs.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import torch

from pfml.finetune import LabeledDataset, ProbeConfig, linear_probe
from pfml.functionals import precompute_dataset_functionals
from pfml.masking import sequence_rng
from pfml.network.model import Backbone
from pfml.pretrain import ModelConfig, PretrainConfig, PretrainResult, pretrain
from pfml.synth import PRESETS, SyntheticSpec, generate
from pfml.timeseries import frames_for_sequences

log = logging.getLogger(__name__)


def preset_frames(spec: SyntheticSpec):
    signals, labels, groups = generate(spec)
    frames = frames_for_sequences(signals, spec.frame_config, spec.num_frames).astype(np.float32)
    return frames, labels, groups


def pretrain_on_preset(cfg: PretrainConfig, model_cfg: ModelConfig = ModelConfig(),
                       spec: SyntheticSpec = PRESETS["unlabeled"]) -> PretrainResult:
    frames, _, _ = preset_frames(spec)
    targets = None
    if cfg.objective == "pfml":
        store = precompute_dataset_functionals(list(frames), cfg.functional_set)
        targets = store.rows.reshape(frames.shape[0], frames.shape[1], -1)
    return pretrain(frames, targets, cfg, model_cfg)


@dataclass
class CollapseRun:
    seed: int
    collapse_epochs: List[int]
    masked_out_var: float
    best_epoch: int
    best_val_loss: float
    min_emb_var: float
    min_out_var: float


def collapse_study(seeds: Iterable[int], cfg: PretrainConfig = PretrainConfig(),
                   model_cfg: ModelConfig = ModelConfig(), keep_models: Optional[Dict] = None
                   ) -> List[CollapseRun]:
    """One pre-training run per seed; ``keep_models`` (if given) collects the backbones."""
    runs = []
    for seed in seeds:
        res = pretrain_on_preset(dataclasses.replace(cfg, seed=seed), model_cfg)
        runs.append(CollapseRun(seed, res.collapse_epochs, res.masked_out_var, res.best_epoch,
                                res.best_val_loss, min(r.emb_var for r in res.log),
                                min(r.out_var for r in res.log)))
        log.info("seed %d: collapse %s, masked output variance %.3f, best val %.4f at %d", seed,
                 res.collapse_epochs, res.masked_out_var, res.best_val_loss, res.best_epoch)
        if keep_models is not None:
            keep_models[seed] = res.model.backbone
    return runs


def random_backbone(seed: int, channels: int, frame_len: int, model_cfg: ModelConfig = ModelConfig()
                    ) -> Backbone:
    torch.manual_seed(int(np.random.SeedSequence([seed, 31]).generate_state(1)[0]))
    return Backbone(channels, frame_len, model_cfg.encoder, model_cfg.transformer)


@dataclass
class ProbeRun:
    seed: int
    pfml_uar: float
    random_uar: float
    shuffled_uar: float
    chance: float


def probe_comparison(seeds: Iterable[int], cfg: PretrainConfig = PretrainConfig(),
                     model_cfg: ModelConfig = ModelConfig(), probe: ProbeConfig = ProbeConfig(),
                     backbones: Optional[Dict[int, Backbone]] = None) -> List[ProbeRun]:
    """Linear-probe UAR of a pre-trained vs a randomly initialized backbone.

    Also probes the random backbone on labels permuted across sequences, which
    should land at chance. Pre-trained backbones are reused from ``backbones``
    when present.
    """
    frames, labels, groups = preset_frames(PRESETS["labeled"])
    k = PRESETS["labeled"].num_classes
    data = LabeledDataset(frames, labels, groups, k)
    out = []
    for seed in seeds:
        pcfg = dataclasses.replace(probe, seed=seed)
        bb = (backbones or {}).get(seed)
        if bb is None:
            bb = pretrain_on_preset(dataclasses.replace(cfg, seed=seed), model_cfg).model.backbone
        rand = random_backbone(seed, frames.shape[2], frames.shape[3], model_cfg)
        pf = linear_probe(bb, data, pcfg)
        rd = linear_probe(rand, data, pcfg)
        shuffled = dataclasses.replace(data, labels=sequence_rng(seed, 41).permutation(labels))
        sh = linear_probe(rand, shuffled, pcfg)
        out.append(ProbeRun(seed, pf.uar, rd.uar, sh.uar, 1.0 / k))
        log.info("seed %d: probe UAR pfml %.3f random %.3f shuffled %.3f", seed, pf.uar, rd.uar, sh.uar)
    return out


def chance_interval(num_items_per_class: np.ndarray, runs: int, z: float = 1.96):
    """Normal-approximation interval for the mean UAR of ``runs`` chance-level classifiers."""
    counts = np.asarray(num_items_per_class, dtype=np.float64)
    k = len(counts)
    p = 1.0 / k
    se = np.sqrt(np.sum(p * (1 - p) / counts)) / k / np.sqrt(runs)
    return p - z * se, p + z * se
