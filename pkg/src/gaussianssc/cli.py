"""Command-line driver: gradcheck, train, eval, ablate, export.

Exit codes: 0 success, 1 gradcheck/acceptance failure, 2 configuration
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import train as tr
from .config import RunConfig, parse_config
from .gssc_io import GsscFormatError, load_params, save_params, write_gssc
from .gradcheck import full_report
from .losses import write_jsonl
from .synth import make_sample, random_scene
from .tensor import ConfigError


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gaussianssc",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=("gradcheck", "train", "eval", "ablate", "export"))
    ap.add_argument("--config", default=None, help="flat key = value config file")
    ap.add_argument("--stage", type=int, default=None, choices=(1, 2))
    ap.add_argument("--checkpoint", default=None, help="checkpoint directory")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None)
    return ap


def _load_config(args) -> RunConfig:
    overrides = {}
    if args.stage is not None:
        overrides["stage"] = args.stage
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = args.out
    return parse_config(args.config, overrides)


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = full_report()
    for rec in report:
        _emit(rec)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_jsonl(os.path.join(cfg.out_dir, "gradcheck.jsonl"), report)
    failed = [r["name"] for r in report if not r["pass"]]
    if failed:
        sys.stderr.write("gradcheck failed: " + ", ".join(failed) + "\n")
        return 1
    return 0


def _load_stage1_checkpoint(cfg: RunConfig, path: str):
    params = tr.make_stage1(cfg)
    load_params(path, params.params())
    return params


def cmd_train(cfg: RunConfig, checkpoint: str | None) -> int:
    suite = tr.build_suite(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    records: list[dict] = []

    def log(rec):
        _emit(rec)
        records.append(rec)

    if cfg.stage == 1:
        params, _ = tr.train_stage1(cfg, suite, log_fn=log)
        save_params(os.path.join(cfg.out_dir, "checkpoint"), params.params())
        tr.export_predictions(cfg, cfg.out_dir, 1, params, None, suite)
    else:
        s1 = None
        if checkpoint is not None:
            s1 = _load_stage1_checkpoint(cfg, checkpoint)
        elif not cfg.use_gt_occupancy:
            raise ConfigError(
                "stage 2 needs --checkpoint or use_gt_occupancy = true")
        params, _ = tr.train_stage2(cfg, suite, s1_params=s1, log_fn=log)
        save_params(os.path.join(cfg.out_dir, "checkpoint"), params.params())
        tr.export_predictions(cfg, cfg.out_dir, 2, s1, params, suite)
    write_jsonl(os.path.join(cfg.out_dir, "metrics.jsonl"), records)
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    if checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    suite = tr.build_suite(cfg)
    if cfg.stage == 1:
        params = tr.make_stage1(cfg)
        load_params(checkpoint, params.params())
        rec = tr.eval_stage1(cfg, params, suite, "eval", 0)
    else:
        params = tr.make_stage2(cfg)
        load_params(checkpoint, params.params())
        rec = tr.eval_stage2(cfg, params, suite, "eval", 0, None)
    _emit(rec)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_jsonl(os.path.join(cfg.out_dir, "eval.jsonl"), [rec])
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    rows = tr.ablate(cfg, log_fn=_emit)
    csv = tr.ablation_csv(rows)
    sys.stdout.write(csv)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "ablation.csv"), "w") as f:
            f.write(csv)
    return 0


def cmd_export(cfg: RunConfig, checkpoint: str | None) -> int:
    """Write the held-out scene (and predictions, given a checkpoint)."""
    out = cfg.out_dir or "."
    os.makedirs(out, exist_ok=True)
    suite = tr.build_suite(cfg)
    sample = suite.eval[0]
    write_gssc(os.path.join(out, "gt_labels.gssc"),
               sample.volume.labels.astype(np.uint8))
    write_gssc(os.path.join(out, "features_level0.gssc"),
               sample.feature_levels[0])
    if checkpoint is not None:
        if cfg.stage == 1:
            params = tr.make_stage1(cfg)
            load_params(checkpoint, params.params())
            tr.export_predictions(cfg, out, 1, params, None, suite)
        else:
            params = tr.make_stage2(cfg)
            load_params(checkpoint, params.params())
            tr.export_predictions(cfg, out, 2, None, params, suite)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_export(cfg, args.checkpoint)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 2
    except (OSError, GsscFormatError) as e:
        sys.stderr.write(f"i/o error: {e}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
