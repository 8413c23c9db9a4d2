"""Command-line entry point.

Subcommands:
  synth          generate a synthetic dataset and write the binary container
  train          run one or all training stages from a dataset
  eval           evaluate a checkpoint against a dataset
  render-export  render a frame's predicted point cloud to a PLY file

Exit codes: 0 success, 2 configuration or prerequisite errors, 3 runtime
failures during a run.
"""

from __future__ import annotations

import argparse
import sys
import traceback

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .dataset_io import CorruptDatasetError, build_dataset, load_dataset, save_dataset
from .geometry import TrainingDivergedError
from .metrics import default_roi, full_roi, roi_filter
from .model import WorldModel
from .render import render_pointcloud, export_ply
from .training import (DataPipeline, StageOrderError, Trainer, TrainerError,
                       evaluate_checkpoint)
from .vocab import Vocab

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_overrides(getattr(args, "set", None) or [])
    cfg.validate()
    return cfg


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    dataset = build_dataset(cfg, seed=args.seed, n_sequences=args.sequences)
    save_dataset(dataset, args.out)
    print(f"wrote {args.sequences} sequences to {args.out} "
          f"(config digest {cfg.digest()})")
    return EXIT_OK


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.resume:
        trainer = Trainer.restore(args.resume, dataset,
                                  overrides=args.set or [],
                                  log_path=args.log, quiet=not args.verbose)
    else:
        cfg = _load_config(args)
        if cfg.to_text() != dataset.config.to_text():
            # training knobs may differ from the dataset's embedded config,
            # but anything describing the recorded data itself must match
            for key, name in RunConfig.key_map().items():
                if (key.startswith(("scene.", "lidar.", "cam."))
                        or key == "query.horizon"):
                    if getattr(cfg, name) != getattr(dataset.config, name):
                        raise ConfigError(
                            f"config {key} does not match the dataset")
        trainer = Trainer(cfg, dataset, log_path=args.log,
                          quiet=not args.verbose)
    stages = (["1a", "1b", "2", "3"] if args.stage == "all"
              else [args.stage])
    for stage in stages:
        if stage == "1a":
            trainer.stage1a()
        elif stage == "1b":
            trainer.stage1b()
        elif stage == "2":
            trainer.stage2()
        elif stage == "3":
            trainer.stage3()
    trainer.save_checkpoint(args.out)
    print(f"saved checkpoint to {args.out} (completed stage {trainer.stage_done})")
    for name, report in trainer.evals.items():
        print(f"{name}: {report.chamfer_by_horizon}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.dataset, roi=args.roi)
    print(report.to_table())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"wrote metrics to {args.csv}")
    return EXIT_OK


def _cmd_render_export(args) -> int:
    state = torch.load(args.checkpoint, weights_only=False)
    cfg = RunConfig.from_text(state["config"])
    vocab = Vocab(state["vocab"])
    dtype = torch.float64 if cfg.train_dtype == "float64" else torch.float32
    torch.manual_seed(cfg.train_seed)
    model = WorldModel(cfg, vocab).to(dtype)
    model.load_state_dict(state["model"])
    model.eval()
    dataset = load_dataset(args.dataset)
    if not 0 <= args.sequence < len(dataset):
        raise ConfigError(f"sequence index {args.sequence} out of range")
    if not 0 <= args.horizon <= cfg.query_horizon:
        raise ConfigError(f"horizon {args.horizon} out of range")
    if args.horizon > 0 and state["stage"] < 3:
        raise ConfigError("future horizons need a stage-3 checkpoint")
    pipe = DataPipeline(dataset, vocab, dtype)
    with torch.no_grad():
        enc = model.encode(pipe.cam_batch([args.sequence]))
        if state["stage"] <= 1:
            vol = model.volume_from_comp(enc["comp"])
        else:
            seq = pipe.seqs[args.sequence]
            text = torch.stack([seq.text_ids[0]])
            motions = pipe.motion_batch([args.sequence])
            queries = model.queries(enc["comp"], motions) if state["stage"] >= 3 else None
            out = model.core(enc["tokens"], text,
                             queries.projected if queries is not None else None)
            maps = [model.comp_from_states(out["bev_states"])]
            if state["stage"] >= 3:
                for fut in model.future_states(out["bev_states"], out, motions):
                    maps.append(model.comp_from_states(fut))
            vol = model.volume_from_comp(maps[args.horizon])
        dirs = pipe.dirs.unsqueeze(0)
        origin = pipe.origin.expand(1, pipe.dirs.shape[0], 3)
        depth, wsum, _ = model.renderer(vol, origin, dirs)
    pts = render_pointcloud(depth, wsum, pipe.origin.numpy().astype(np.float64),
                            pipe.dirs.numpy().astype(np.float64),
                            cfg.render_weight_threshold)
    if args.roi != "none":
        region = full_roi() if args.roi == "full" else default_roi(cfg.scene_extent)
        pts = roi_filter(pts, region)
    export_ply(pts, args.out)
    print(f"wrote {pts.shape[0]} points to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevworld",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--stage", default="all",
                   choices=["all", "1a", "1b", "2", "3"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--log", help="per-step CSV loss log path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--roi", default="default", choices=["default", "full"])
    p.add_argument("--csv", help="also write metrics as CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render-export", help="export a rendered point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--horizon", type=int, default=0)
    p.add_argument("--roi", default="none", choices=["none", "default", "full"])
    p.add_argument("--out", required=True, help="output PLY path")
    p.set_defaults(func=_cmd_render_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorruptDatasetError, StageOrderError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainerError, TrainingDivergedError, RuntimeError, ValueError) as exc:
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
