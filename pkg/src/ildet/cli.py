"""Command line entry point (``ildet``).

Exit codes: 0 success, 2 invalid input or configuration, 3 training diverged.
Set ``ILDET_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for progress output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .container import ContainerError
from .data import save_split
from .experiments import (
    METHODS,
    ExperimentConfig,
    Lab,
    RunRecord,
    emit_report,
    run_extension,
    run_phase1,
    run_sequential,
    run_suite,
    sweep_lambda,
)
from .evaluation import evaluate
from .kernel import DimensionError
from .model import ClassSet, ValidationError
from .training import DivergenceError

LOG_ENV = "ILDET_LOG_LEVEL"
EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("ildet")


def _float_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [world], [experiment], [optimizer]")
    common.add_argument("--seed", type=int, help="experiment seed (world and training)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--method", choices=METHODS, help="extension method")
    common.add_argument("--lambda", dest="lam", type=float, help="distillation weight")
    common.add_argument("--checkpoint", type=Path, help="ILDET1 checkpoint to start from or evaluate")
    common.add_argument("--lambdas", type=_float_list, help="comma-separated lambda values to sweep")

    parser = argparse.ArgumentParser(prog="ildet",
                                     description="Incremental detector learning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("gen-data", "generate and save the train/val/test splits"),
        ("train-base", "train the detector on the old classes"),
        ("extend", "add the new classes at once with --method"),
        ("extend-seq", "add the new classes one at a time"),
        ("sweep-lambda", "distill_l2 extension for every lambda"),
        ("evaluate", "evaluate --checkpoint on the test split"),
        ("compare", "run every method and write the comparison report"),
    ]:
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method is not None:
        overrides["method"] = args.method
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.lambdas is not None:
        overrides["lambdas"] = args.lambdas
    if args.config is not None:
        return ExperimentConfig.from_file(args.config, **overrides)
    if args.checkpoint is not None and args.command == "evaluate":
        _, _, meta = load_checkpoint(args.checkpoint)
        if "config" in meta:
            return ExperimentConfig.from_ini(meta["config"], **overrides)
    return ExperimentConfig(**overrides)


def _base(cfg, args, lab, need_fisher=False):
    if args.checkpoint is not None:
        model, fisher, _ = load_checkpoint(args.checkpoint)
        if need_fisher and fisher is None:
            raise ValidationError(f"{args.checkpoint} holds no Fisher estimate; retrain it with "
                                  "train-base --method ewc")
        return model, fisher
    res = run_phase1(cfg, with_fisher=need_fisher, out_dir=args.out, lab=lab)
    return res.model, res.fisher


def _print(records):
    for r in records:
        rep = r.report
        print(f"{r.label}: old {rep.old:.4f}  new {rep.new:.4f}  all {rep.map50:.4f}  "
              f"mAP@[.5:.95] {rep.map_coco:.4f}")


def _write_config(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())


def run(args) -> int:
    cfg = _config(args)
    out = args.out
    _write_config(cfg, out)
    lab = Lab.for_config(cfg)
    cmd = args.command
    if cmd == "gen-data":
        splits = {"train_old": lab.split(cfg.old_classes),
                  "train_new": lab.split(cfg.new_classes, "train", cfg.shifted_phase2),
                  "val": lab.val(), "test": lab.test()}
        for name, split in splits.items():
            path = save_split(split, out / f"{name}.ildet")
            print(f"{path}: {len(split)} scenes")
        return EXIT_OK
    if cmd == "train-base":
        res = run_phase1(cfg, with_fisher=cfg.method == "ewc", out_dir=out, lab=lab, label="base")
        records = [res.record]
        print(f"checkpoint: {res.record.checkpoint_path}")
    elif cmd == "extend":
        need_fisher = cfg.method == "ewc"
        if cfg.method == "joint_baseline":
            base, fisher = None, None
        else:
            base, fisher = _base(cfg, args, lab, need_fisher)
        res = run_extension(cfg, base, fisher, out_dir=out, lab=lab)
        records = [res.record]
        if "ewc_strength" in res.record.extra:
            print(f"EWC strength: {res.record.extra['ewc_strength']:g}")
    elif cmd == "extend-seq":
        base, _ = _base(cfg, args, lab)
        res = run_sequential(cfg, base, out_dir=out, lab=lab)
        stages = [RunRecord(res.record.method, cfg.hash, rep, res.record.lam,
                            f"{res.record.label}[+{c}]")
                  for c, rep in zip(cfg.new_classes, res.record.stages)]
        records = stages + [res.record]
    elif cmd == "sweep-lambda":
        base, _ = _base(cfg, args, lab)
        records = sweep_lambda(cfg, base, out_dir=out, lab=lab)
    elif cmd == "evaluate":
        if args.checkpoint is None:
            raise ValidationError("evaluate needs --checkpoint")
        model, _, meta = load_checkpoint(args.checkpoint)
        cs = model.class_set
        if set(cs.all) == set(cfg.old_classes + cfg.new_classes):
            cs = ClassSet(cfg.old_classes, cfg.new_classes)
        rep = evaluate(model, lab.test().scenes, cs.all, cs, cfg.score_threshold, cfg.nms_iou,
                       cfg.ap_mode)
        label = meta.get("method", Path(args.checkpoint).stem)
        records = [RunRecord(label, cfg.hash, rep)]
    elif cmd == "compare":
        suite = run_suite(cfg, out_dir=out)
        _print(list(suite.records.values()))
        print(f"reports written to {out}")
        return EXIT_OK
    else:  # pragma: no cover - argparse rejects unknown commands
        raise ValidationError(f"unknown command {cmd}")
    emit_report(records, out)
    _print(records)
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, ContainerError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
