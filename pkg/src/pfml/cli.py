"""Command-line entry point: ``pfml <command> --config cfg.json --out DIR``."""

from __future__ import annotations

import argparse
import hashlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from pfml import config as cfgmod
from pfml import pipeline
from pfml.config import ConfigError, ExperimentConfig, load_config
from pfml.finetune import cross_validate, evaluate, linear_probe, uaf1, uar
from pfml.functionals import write_store
from pfml.masking import MaskLocation
from pfml.network.model import parameter_digest
from pfml.pretrain import CollapseMonitor, collapse_check, pretrain
from pfml.synth import write_dataset

log = logging.getLogger("pfml")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    pre = cfg.pretrain
    if getattr(args, "objective", None):
        pre = dataclasses.replace(pre, objective=args.objective)
    if getattr(args, "mask_location", None):
        pre = dataclasses.replace(pre, mask=dataclasses.replace(pre.mask, mask_location=MaskLocation(args.mask_location)))
    cfg = dataclasses.replace(cfg, pretrain=pre)
    if getattr(args, "checkpoint", None):
        cfg = dataclasses.replace(cfg, checkpoint=str(Path(args.checkpoint).resolve()))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_synth(cfg: ExperimentConfig, out: Path, args) -> None:
    manifest = write_dataset(cfg.synth, out)
    print(f"wrote {len(manifest.entries)} sequences to {out}")


def cmd_extract(cfg: ExperimentConfig, out: Path, args) -> None:
    manifest, frames = pipeline.load_frames(cfg)
    store = pipeline.functional_targets(dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, functionals=None)), frames)
    write_store(out / "functionals.pffn", store)
    print(f"wrote {store.rows.shape[0]} frames x {store.rows.shape[1]} functionals to {out / 'functionals.pffn'}")


def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> None:
    manifest, frames = pipeline.load_frames(cfg)
    store = targets = None
    if cfg.pretrain.objective == "pfml":
        store = pipeline.functional_targets(cfg, frames)
        targets = store.rows.reshape(frames.shape[0], frames.shape[1], -1)
    result = pretrain(frames, targets, cfg.pretrain, cfg.model)
    pipeline.save_pretrain_checkpoint(out / "checkpoint.pfck", cfg, result, frames.shape[2],
                                      frames.shape[3], store)
    pipeline.write_log(out / "train_log.csv", result.log)
    _write_json(out / "run.json", {
        "config": cfgmod.to_dict(cfg),
        "config_digest": cfgmod.digest(cfg),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "masked_output_variance": result.masked_out_var,
        "collapse_epochs": result.collapse_epochs,
        "mask_digests": result.mask_digests,
        "lr_floor": cfg.pretrain.lr * cfg.pretrain.min_lr_ratio,
        "patience": cfg.pretrain.patience,
    })
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.5f}; "
          f"collapse flagged at {result.collapse_epochs or 'no epoch'}")


def _run_meta(cfg: ExperimentConfig, out: Path, **extra) -> None:
    meta = {"config": cfgmod.to_dict(cfg), "config_digest": cfgmod.digest(cfg)}
    if cfg.checkpoint:
        meta["checkpoint_sha256"] = hashlib.sha256(cfg.resolve(cfg.checkpoint).read_bytes()).hexdigest()
    _write_json(out / "run.json", {**meta, **extra})


def _backbone_factory(cfg: ExperimentConfig, channels: int, frame_len: int):
    if cfg.checkpoint:
        path = cfg.resolve(cfg.checkpoint)
        return (lambda: pipeline.backbone_from_checkpoint(path)[0]), True
    counter = iter(range(10**6))
    return (lambda: pipeline.random_backbone(cfg, channels, frame_len, next(counter))), False


def _metrics_rows(cms, agg, task):
    rows = [[i, task, uaf1(cm), uar(cm), int(cm.sum())] for i, cm in enumerate(cms)]
    rows.append(["aggregate", task, uaf1(agg), uar(agg), int(agg.sum())])
    return rows


METRIC_HEADER = ["fold", "task", "uaf1", "uar", "n_test"]


def cmd_finetune(cfg: ExperimentConfig, out: Path, args) -> None:
    manifest, frames = pipeline.load_frames(cfg)
    data = pipeline.labeled_dataset(manifest, frames)
    fcfg = cfg.finetune
    if fcfg.sensor_groups is None and manifest.sensor_groups:
        fcfg = dataclasses.replace(fcfg, sensor_groups=tuple(map(tuple, manifest.sensor_groups)))
    if data.frame_level and fcfg.pooling != "frame":
        fcfg = dataclasses.replace(fcfg, pooling="frame")
    make, pretrained = _backbone_factory(cfg, frames.shape[2], frames.shape[3])

    def save(fold, model, cm):
        pipeline.save_classifier_checkpoint(out / f"model_fold{fold.index:02d}.pfck", cfg, model,
                                            frames.shape[2], frames.shape[3], {"fold": fold.index})

    cms, agg = cross_validate(make, data, fcfg, pretrained, save)
    pipeline.write_csv(out / "metrics.csv", METRIC_HEADER, _metrics_rows(cms, agg, manifest.task))
    pipeline.write_confusion(out / "confusion.csv", agg)
    _run_meta(cfg, out, pretrained=pretrained, uaf1=uaf1(agg), uar=uar(agg))
    print(f"UAF1 {uaf1(agg):.4f} UAR {uar(agg):.4f} over {int(agg.sum())} test items "
          f"({'pre-trained' if pretrained else 'no pre-training'})")


def cmd_probe(cfg: ExperimentConfig, out: Path, args) -> None:
    manifest, frames = pipeline.load_frames(cfg)
    data = pipeline.labeled_dataset(manifest, frames)
    make, pretrained = _backbone_factory(cfg, frames.shape[2], frames.shape[3])
    pcfg = cfg.probe
    if data.frame_level and pcfg.pooling != "frame":
        pcfg = dataclasses.replace(pcfg, pooling="frame")
    backbone = make()
    before = parameter_digest(backbone)
    res = linear_probe(backbone, data, pcfg)
    if parameter_digest(backbone) != before:
        raise RuntimeError("linear probe modified the backbone")
    pipeline.write_csv(out / "metrics.csv", METRIC_HEADER,
                       [["aggregate", manifest.task, res.uaf1, res.uar, int(res.cm.sum())]])
    pipeline.write_confusion(out / "confusion.csv", res.cm)
    _run_meta(cfg, out, pretrained=pretrained, uaf1=res.uaf1, uar=res.uar)
    print(f"linear probe UAR {res.uar:.4f} UAF1 {res.uaf1:.4f} "
          f"({'pre-trained' if pretrained else 'random init'} backbone)")


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> None:
    if not cfg.eval.checkpoint:
        raise ConfigError("eval: 'checkpoint' is required")
    model = pipeline.classifier_from_checkpoint(cfg.resolve(cfg.eval.checkpoint))
    manifest, frames = pipeline.load_frames(cfg)
    data = pipeline.labeled_dataset(manifest, frames)
    cm = evaluate(model, data, cfg.eval.batch_size)
    pipeline.write_csv(out / "metrics.csv", METRIC_HEADER,
                       [["aggregate", manifest.task, uaf1(cm), uar(cm), int(cm.sum())]])
    pipeline.write_confusion(out / "confusion.csv", cm)
    _run_meta(cfg, out, uaf1=uaf1(cm), uar=uar(cm))
    print(f"UAF1 {uaf1(cm):.4f} UAR {uar(cm):.4f} over {int(cm.sum())} items")


def collapse_report(rows, threshold: float = 0.01, window: int = 10):
    """Re-apply the collapse rule to logged epochs; returns one report row per epoch."""
    monitor = CollapseMonitor(threshold, window)
    report = []
    for r in rows:
        st = collapse_check(monitor, r.emb_var, r.out_var, r.val_loss)
        report.append((r.epoch, st.collapsed, st.run_length, st.margin, r.collapse_flag))
    return report


def cmd_collapse_report(cfg, out: Path, args) -> None:
    if not args.log:
        raise ConfigError("collapse-report needs --log PATH")
    rows = pipeline.read_log(args.log)
    threshold = cfg.pretrain.collapse_threshold if cfg else 0.01
    window = cfg.pretrain.collapse_window if cfg else 10
    report = collapse_report(rows, threshold, window)
    pipeline.write_csv(out / "collapse_report.csv",
                       ["epoch", "collapsed", "run_length", "margin", "logged_flag"], report)
    mismatched = [e for e, c, _, _, logged in report if c != logged]
    fired = [e for e, c, *_ in report if c]
    print(f"collapse criterion met at epochs {fired or 'none'}; "
          f"{'matches' if not mismatched else 'DIFFERS from'} logged flags")
    if mismatched:
        raise RuntimeError(f"recomputed collapse verdict differs from log at epochs {mismatched}")


COMMANDS = {
    "synth": cmd_synth,
    "extract-functionals": cmd_extract,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "collapse-report": cmd_collapse_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfml", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "collapse-report", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "pretrain":
            p.add_argument("--objective", choices=["pfml", "mae"])
            p.add_argument("--mask-location", choices=["embeddings", "inputs"])
        if name in ("finetune", "probe"):
            p.add_argument("--checkpoint", help="pre-trained checkpoint (overrides config)")
        if name == "collapse-report":
            p.add_argument("--log", help="train_log.csv from a pretrain run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _load(args) if args.config else None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (ConfigError, ValueError, FileNotFoundError, FloatingPointError, RuntimeError) as exc:
        print(f"pfml {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
