"""``liverstad`` command line.

Exit codes: 0 success, 2 invalid input or configuration, 3 some cases in
the batch were skipped (see the command's report).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from ..errors import LiverStadError
from .commands import (
    cmd_augment,
    cmd_eval,
    cmd_extract,
    cmd_phantom,
    cmd_predict,
    cmd_register,
    cmd_train,
)
from .config import PipelineConfig, load_config

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_PARTIAL = 3

log = logging.getLogger("liverstad")


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies must not reset values given before the subcommand
    d = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="pipeline configuration (JSON)")
    p.add_argument("--seed", type=_nonneg, default=d(None), help="master seed; overrides the config")
    p.add_argument("--jobs", type=_positive, default=d(1), help="worker processes")
    p.add_argument("--overwrite", action="store_true", default=d(False), help="allow replacing existing outputs")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="liverstad", parents=[_global_flags(suppress=False)],
                                     description="Liver MRI registration, STAD features and fibrosis staging.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common], help="register GED4 to other modalities, transfer masks")
    p.add_argument("manifest")
    p.add_argument("out", help="output folder")

    p = sub.add_parser("augment", parents=[common], help="vendor-wise instance mixing of GED4 cases")
    p.add_argument("manifest")
    p.add_argument("out", help="output folder")
    p.add_argument("--per-source", type=_nonneg, help="mixes per annotated case")

    p = sub.add_parser("extract", parents=[common], help="STAD feature table")
    p.add_argument("manifest")
    p.add_argument("out", help="feature CSV path")
    p.add_argument("--pseudo-labels", help="folder of pseudo-label masks from 'register'")
    p.add_argument("--predictions", help="folder of predicted masks")

    p = sub.add_parser("train", parents=[common], help="train staging forests")
    p.add_argument("features", help="feature CSV")
    p.add_argument("manifest", help="manifest with stage labels")
    p.add_argument("out", help="output folder")
    p.add_argument("--task", action="append", choices=["cirrhosis", "substantial_fibrosis"])
    p.add_argument("--group", action="append", choices=["noncontrast", "contrast"])

    p = sub.add_parser("predict", parents=[common], help="per-case staging probabilities")
    p.add_argument("features", help="feature CSV")
    p.add_argument("model", help="model JSON")
    p.add_argument("out", help="score CSV path")

    p = sub.add_parser("eval", parents=[common], help="segmentation or staging metrics")
    p.add_argument("--pred-dir")
    p.add_argument("--truth-dir")
    p.add_argument("--scores", help="score CSV from 'predict'")
    p.add_argument("--manifest")
    p.add_argument("--task", choices=["cirrhosis", "substantial_fibrosis"])
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom cohort")
    p.add_argument("spec", help="phantom spec (JSON)")
    p.add_argument("out", help="output folder")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_seed(args.seed)
    if getattr(args, "per_source", None) is not None:
        cfg = dataclasses.replace(cfg, augmentation=dataclasses.replace(cfg.augmentation,
                                                                          per_source=args.per_source))
    return cfg


def run(args) -> int:
    cfg = _config(args)
    if args.command == "register":
        report = cmd_register(args.manifest, args.out, cfg, args.jobs, args.overwrite)
    elif args.command == "augment":
        report = cmd_augment(args.manifest, args.out, cfg, args.overwrite)
    elif args.command == "extract":
        report = cmd_extract(args.manifest, args.out, cfg, args.pseudo_labels, args.predictions,
                             args.jobs, args.overwrite)
    elif args.command == "train":
        report = cmd_train(args.features, args.manifest, args.out, cfg, args.task, args.group, args.overwrite)
    elif args.command == "predict":
        report = cmd_predict(args.features, args.model, args.out, args.overwrite)
    elif args.command == "eval":
        result = cmd_eval(args.out, args.overwrite, args.pred_dir, args.truth_dir, args.scores,
                          args.manifest, args.task)
        print(result.table())
        return EXIT_OK
    else:
        report = cmd_phantom(args.spec, args.out, args.seed, args.overwrite)
    for item in report.skipped:
        log.warning("skipped %s %s: %s (%s)", item["case_id"], item["modality"] or "", item["reason"],
                    item["message"])
    print(f"{report.command}: {len(report.processed)} done, {len(report.skipped)} skipped")
    return report.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except LiverStadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
