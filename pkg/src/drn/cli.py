"""Command-line entry points.

Subcommands: gen-data, train, eval, ablate, analyze-best-locations.
Exit codes: 0 success, 1 configuration/IO errors, 2 numerical aborts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import (
    AblateConfig,
    ConfigError,
    ModelConfig,
    RunConfig,
    SynthConfig,
    apply_fusion_mode,
    load_run_config,
)
from .dataio import CodecError, DatasetError, load_dataset
from .evaluate import (
    best_location_histogram,
    dump_predictions_jsonl,
    format_recall_grid,
    per_sample_best_iou,
    predict_dataset,
    recall_grid,
    top_n,
)
from .model import DrnModel
from .reports import RunResult, emit_report, history_csv
from .synth import generate_dataset
from .train import (
    CheckpointError,
    Trainer,
    build_model_for_dataset,
    checkpoint_load,
    restore_model,
    train_three_step,
)

log = logging.getLogger("drn")

USER_ERRORS = (ConfigError, CodecError, DatasetError, CheckpointError, OSError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drn", description="Dense regression for video grounding")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate a synthetic grounding dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="run three-step training")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--sampling", choices=["All", "Half", "Random", "Center"])
    p.add_argument("--quality-head", choices=["iou", "centerness", "none"])
    p.add_argument("--fusion", choices=["full", "mlf", "loc", "none", "mlf_same"])
    p.add_argument("--epochs", help="per-stage epochs as E1,E2,E3")
    p.add_argument("--paper-dims", action="store_true", help="use the full-size text-encoder dims")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--subset", choices=["all", "plain", "temporal"], default="all")
    p.add_argument("--quality-head", choices=["iou", "centerness", "none"])
    p.add_argument("--fusion", choices=["full", "mlf", "loc", "none", "mlf_same"])

    p = sub.add_parser("ablate", help="run the declared ablation grid")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze-best-locations", help="best-location histogram over a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--quality-head", choices=["iou", "centerness", "none"])
    p.add_argument("--fusion", choices=["full", "mlf", "loc", "none", "mlf_same"])
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _apply_model_flags(model_cfg: ModelConfig, args) -> None:
    if getattr(args, "quality_head", None):
        model_cfg.quality_head = args.quality_head
    if getattr(args, "fusion", None):
        apply_fusion_mode(model_cfg, args.fusion)
    if getattr(args, "paper_dims", False):
        model_cfg.apply_paper_dims()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    manifest = generate_dataset(cfg.synth, seed=cfg.seed, out_dir=args.out)
    print(f"wrote dataset to {manifest.parent}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.sampling:
        cfg.train.sampling = args.sampling
    if args.epochs:
        try:
            e1, e2, e3 = (int(x) for x in args.epochs.split(","))
        except ValueError as exc:
            raise ConfigError(f"--epochs must be E1,E2,E3, got {args.epochs!r}") from exc
        cfg.train.epochs_stage1, cfg.train.epochs_stage2, cfg.train.epochs_stage3 = e1, e2, e3
    _apply_model_flags(cfg.model, args)

    train_data = load_dataset(args.data, "train")
    val_data = load_dataset(args.data, "val")
    model = build_model_for_dataset(cfg.model, train_data, seed=cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        from .train import restore_trainer

        trainer = Trainer(model, cfg.train, cfg.eval, train_data, val_data, seed=cfg.seed)
        stage, epoch = restore_trainer(trainer, checkpoint_load(args.resume))
        result = trainer.run(out_dir=out_dir, resume_stage=stage, resume_epoch=epoch)
    else:
        result = train_three_step(model, cfg.train, cfg.eval, train_data, val_data,
                                  seed=cfg.seed, out_dir=out_dir)
    history_csv(out_dir / "metrics.csv", result.history)
    print(f"wrote checkpoints and metrics to {out_dir}")
    return 0


def _model_from_checkpoint(args, cfg: RunConfig, dataset):
    _apply_model_flags(cfg.model, args)
    model = build_model_for_dataset(cfg.model, dataset, seed=cfg.seed)
    restore_model(model, checkpoint_load(args.checkpoint))
    return model


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data, args.split)
    if args.subset != "all":
        data.samples = [s for s in data.samples if s.kind == args.subset]
    if not data.samples:
        raise DatasetError(f"no samples in split {args.split!r} subset {args.subset!r}")
    model = _model_from_checkpoint(args, cfg, data)

    candidates = predict_dataset(model, data.samples)
    max_n = max(cfg.eval.top_ns)
    topn = [top_n(c, max_n, cfg.eval.nms_threshold) for c in candidates]
    gts = [s.gt_segments for s in data.samples]
    grid = recall_grid(topn, gts, cfg.eval.top_ns, cfg.eval.iou_thresholds)
    print(format_recall_grid(grid))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_predictions_jsonl(out_dir / "predictions.jsonl", data.samples, topn)
    with open(out_dir / "recall.json", "w", encoding="utf-8") as fh:
        json.dump({f"R@{n} IoU={m:g}": v for (n, m), v in sorted(grid.items())}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    ab = cfg.ablate
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    methods = [
        f"{sampling}/{quality}/{fusion}"
        for sampling in ab.sampling
        for quality in ab.quality
        for fusion in ab.fusion
    ]
    seeds = list(ab.seeds)
    results: list[RunResult] = []
    for seed in seeds:
        data_dir = out_dir / f"data-seed{seed}"
        synth_cfg = dataclasses.replace(
            cfg.synth, num_train=ab.num_train, num_val=ab.num_val, num_test=ab.num_test
        )
        if not (data_dir / "manifest.json").exists():
            generate_dataset(synth_cfg, seed=seed, out_dir=data_dir)
        train_data = load_dataset(data_dir, "train")
        test_data = load_dataset(data_dir, "test")
        gts = [s.gt_segments for s in test_data.samples]
        for sampling in ab.sampling:
            for quality in ab.quality:
                for fusion in ab.fusion:
                    method = f"{sampling}/{quality}/{fusion}"
                    model_cfg = dataclasses.replace(cfg.model, quality_head=quality)
                    apply_fusion_mode(model_cfg, fusion)
                    model = build_model_for_dataset(model_cfg, train_data, seed=seed)
                    train_cfg = dataclasses.replace(
                        cfg.train,
                        sampling=sampling,
                        epochs_stage1=ab.epochs_stage1,
                        epochs_stage2=ab.epochs_stage2,
                        epochs_stage3=ab.epochs_stage3,
                    )
                    train_three_step(model, train_cfg, cfg.eval, train_data, None, seed=seed)
                    candidates = predict_dataset(model, test_data.samples)
                    topn = [top_n(c, 5, cfg.eval.nms_threshold) for c in candidates]
                    metrics = {
                        "R@1@0.5": None, "R@1@0.7": None, "R@5@0.5": None, "R@5@0.7": None,
                    }
                    grid = recall_grid(topn, gts, (1, 5), (0.5, 0.7))
                    for (n, m), v in grid.items():
                        metrics[f"R@{n}@{m}"] = v
                    results.append(RunResult(method=method, seed=seed, metrics=metrics))
                    log.info("ablate %s seed %d: %s", method, seed,
                             {k: round(v, 2) for k, v in metrics.items() if v is not None})
    complete = emit_report(results, methods, seeds, out_dir / "ablation.csv", out_dir / "ablation.md")
    print(f"wrote ablation tables to {out_dir}")
    return 0 if complete else 1


def cmd_analyze_best_locations(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data, args.split)
    model = _model_from_checkpoint(args, cfg, data)
    candidates = predict_dataset(model, data.samples)
    gts = [s.gt_segments for s in data.samples]
    hist = best_location_histogram(candidates, gts)
    best_ious = per_sample_best_iou(candidates, gts)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "histogram": hist,
        "mean_best_iou": sum(best_ious) / len(best_ious),
        "per_sample_best_iou": [round(v, 6) for v in best_ious],
    }
    with open(out_dir / "best_locations.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for name, frac in hist.items():
        print(f"{name}: {100.0 * frac:.2f}%")
    print(f"mean best tIoU: {payload['mean_best_iou']:.4f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze-best-locations": cmd_analyze_best_locations,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
