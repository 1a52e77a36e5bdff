"""Command-line entry point: ``python -m bevda <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..cyclegan import TrainingDiverged
from ..detector import DetectorDiverged
from ..engine.checkpoint import CheckpointError
from . import commands as cmd
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import DatasetError

log = logging.getLogger("bevda")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevda", description="Synthetic-to-real BEV domain adaptation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run seed (overrides [experiment] seed)")
    common.add_argument("--out", type=Path, help="output directory (overrides [experiment] out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="simulate the S, R and test_R splits")
    g.add_argument("--real-kitti", type=Path, metavar="DIR",
                   help="use KITTI velodyne/ + label_2/ frames as the R domain")

    t = sub.add_parser("train-cyclegan", parents=[common], help="train the S <-> R CycleGAN")
    t.add_argument("--resume", type=Path, metavar="CKPT", help="continue from a checkpoint")

    tr = sub.add_parser("translate", parents=[common], help="translate S into the DA split")
    tr.add_argument("--checkpoint", type=Path, help="CycleGAN checkpoint (default: the run's)")

    d = sub.add_parser("train-detector", parents=[common], help="train one detector")
    d.add_argument("--model", choices=list(cmd.MODELS), required=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained detector")
    e.add_argument("--model", choices=list(cmd.MODELS), required=True)
    e.add_argument("--split", default="test_R")
    e.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a true positive")

    r = sub.add_parser("run-table1", parents=[common], help="full five-model pipeline")
    r.add_argument("--real-kitti", type=Path, metavar="DIR")
    return p


def resolve_config(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    out = args.out if args.out is not None else Path(cfg.out_dir)
    return cfg, out


def _gan_progress(cfg: ExperimentConfig):
    every = max(1, cfg.cyclegan.steps // 20)

    def progress(rep):
        if rep.step % every == 0:
            log.info("cyclegan step %d  cyc %.4f  total %.4f", rep.step, rep.cyc, rep.total)

    return progress


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        cfg, out = resolve_config(args)
        if args.command == "gen-data":
            entries = cmd.cmd_gen_data(cfg, out, args.real_kitti)
            log.info("wrote %s", ", ".join(f"{k}: {len(v)}" for k, v in entries.items()))
        elif args.command == "train-cyclegan":
            cmd.cmd_train_cyclegan(cfg, out, args.resume, log=_gan_progress(cfg))
        elif args.command == "translate":
            entries = cmd.cmd_translate(cfg, out, args.checkpoint)
            log.info("translated %d images", len(entries))
        elif args.command == "train-detector":
            det = cmd.cmd_train_detector(cfg, out, args.model)
            log.info("%s final loss %.4f", args.model, det.losses[-1])
        elif args.command == "eval":
            r = cmd.cmd_eval(cfg, out, args.model, args.split, args.iou)
            log.info("%s AP %.4f (TP %d, FP %d, GT %d)", args.model, r.ap, r.tp, r.fp, r.n_gt)
        elif args.command == "run-table1":
            results = cmd.cmd_run_table1(
                cfg, out, args.real_kitti,
                log=lambda m, r: log.info("%-9s AP %.4f", m, r.ap),
                timer=lambda stage, s: log.info("%s done in %.0f s", stage, s),
                gan_log=_gan_progress(cfg))
            log.info("table written to %s", out / "table1.csv")
            for model, r in results.items():
                print(f"{model:9s} {cmd.MODELS[model][0]:11s} AP {100 * r.ap:6.2f}%")
    except (ConfigError, DatasetError, cmd.CheckpointMismatch, cmd.StageError,
            TrainingDiverged, DetectorDiverged, CheckpointError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
