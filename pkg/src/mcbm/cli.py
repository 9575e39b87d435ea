"""Command line entry point: ``mcbm {generate,train,report,sweep,rerun}``.

Exit codes: 0 success, 1 manifest re-run mismatch, 2 config error,
3 numeric failure (NaN/inf), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .datagen import ConfigError
from .diffcore import CheckpointError
from .models import ModelConfigError
from .training import TrainingDivergedError

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("mcbm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcbm", description="Concept bottleneck experiments on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (default: $MCBM_OUTPUT_DIR, then config output_dir)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--threads", type=int, help="worker processes for sweeps (default $MCBM_THREADS or 1)")

    common(sub.add_parser("generate", help="write a dataset CSV and sidecar"))
    common(sub.add_parser("train", help="train one model; writes checkpoint, history and manifest"))
    rp = sub.add_parser("report", help="metrics, intervention curves, calibration, or closed-form demos")
    rp.add_argument("which", choices=pipeline.REPORTS)
    rp.add_argument("--run", help="run directory produced by 'train'")
    common(rp, config_required=False)
    common(sub.add_parser("sweep", help="train and compare models over gammas or variants"))
    rr = sub.add_parser("rerun", help="replay a manifest and compare output hashes")
    rr.add_argument("manifest")
    rr.add_argument("--out", required=True)
    rr.add_argument("--threads", type=int)
    return p


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("MCBM_THREADS", "1"))


def _load(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, cfg: pipeline.ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("MCBM_OUTPUT_DIR")
    if env:
        return Path(env)
    if cfg is not None:
        return Path(cfg.output_dir)
    raise ConfigError("no output directory: pass --out or set output_dir")


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "rerun":
            res = pipeline.rerun_manifest(args.manifest, args.out, _threads(args))
            print(json.dumps(res, indent=1))
            return EXIT_OK if res["reproduced"] else EXIT_MISMATCH
        if args.command == "report":
            cfg = _load(args) if args.config else None
            out = args.out or os.environ.get("MCBM_OUTPUT_DIR") or args.run or (cfg.output_dir if cfg else None)
            if out is None:
                raise ConfigError("no output directory: pass --out or --run")
            man = pipeline.cmd_report(args.run, args.which, cfg, out)
        else:
            cfg = _load(args)
            out = _out(args, cfg)
            if args.command == "generate":
                man = pipeline.cmd_generate(cfg, out)
            elif args.command == "train":
                man = pipeline.cmd_train(cfg, out)
            else:
                man = pipeline.cmd_sweep(cfg, out, _threads(args))
        print(man)
        return EXIT_OK
    except (ConfigError, ModelConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
