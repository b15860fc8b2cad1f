"""Command line entry point: ``mfd-v2v <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .pipeline import Run, StageError, cmd_ablate, cmd_evaluate, cmd_sample, cmd_synth_data, cmd_train

VERBS = ("synth-data", "train", "sample", "evaluate", "ablate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfd-v2v", description="Motion-guided cine video synthesis on phantom data.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", type=Path, help="JSON run config merged onto the preset")
        s.add_argument("--preset", choices=sorted(C.PRESETS), help="named base config (default: toy)")
        s.add_argument("--seed", type=int, help="global seed override")
        s.add_argument("--out", type=Path, help="run directory (default: runs/<timestamp>-<run id>)")
        s.add_argument("--resume", action="store_true", help="skip stages whose outputs are up to date")
        s.add_argument("--runs-root", type=Path, default=Path("runs"), help=argparse.SUPPRESS)
        s.add_argument("-v", "--verbose", action="store_true")
        if verb in ("train", "sample"):
            s.add_argument("--variant", choices=C.VARIANTS, default="full")
        if verb == "evaluate":
            s.add_argument("--variant", choices=C.VARIANTS, action="append", help="restrict to these variants")
        if verb == "sample":
            s.add_argument("--motion", type=Path, help="MVT1 displacement file; default is the reference set")
            s.add_argument("-n", "--num", type=int, help="number of videos to sample")
    return p


def _latest_run(root: Path, rid: str) -> Path | None:
    found = sorted(root.glob(f"*-{rid}")) if root.exists() else []
    return found[-1] if found else None


def open_run(args, cfg: dict) -> Run:
    out = args.out
    if out is None and args.verb in ("train", "sample", "evaluate"):
        # later stages continue the newest run made with the same config
        out = _latest_run(args.runs_root, C.run_id(cfg))
    return Run(cfg, out=out, resume=args.resume, root=args.runs_root)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.preset, args.seed)
        run = open_run(args, cfg)
        print(f"run directory: {run.dir}")
        if args.verb == "synth-data":
            print(f"manifest: {cmd_synth_data(run)}")
        elif args.verb == "train":
            for name, path in cmd_train(run, args.variant).items():
                print(f"{name}: {path}")
        elif args.verb == "sample":
            print(f"samples: {cmd_sample(run, args.variant, args.motion, args.num)}")
        elif args.verb == "evaluate":
            report = cmd_evaluate(run, args.variant)
            print(f"report: {run.dir / 'report.json'}")
            if "full_beats" in report:
                print(json.dumps({"full_beats": report["full_beats"]}))
        elif args.verb == "ablate":
            report = cmd_ablate(run)
            print(f"report: {run.dir / 'report.json'}")
            if "full_beats" in report:
                print(json.dumps({"full_beats": report["full_beats"]}))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
