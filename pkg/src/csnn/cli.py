"""Command-line entry point: ``csnn {synth,prep,learn,viz,calibrate,eval}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .kernels import BankFormatError, ParamError
from .netbuild import CalibrationError


def _parser() -> argparse.ArgumentParser:
    epilog = "config keys (flat 'key = value' file, '#' comments):\n" + pl.config_help()
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="csnn", description="Convolutional spiking network pipeline.",
                                epilog=epilog, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        sp.add_argument("--config", type=Path, help="config file; omitted keys take their defaults")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--folds", type=int, help="override the fold count")
        sp.add_argument("--kernels", type=int, help="override the kernel count N_C")
        sp.add_argument("--out", help="override work_dir")
        return sp

    stage("prep", "crop, heat-map and shrink every labelled box into 31x31 patches")
    stage("learn", "learn the convolution kernel bank from the patch corpus")
    viz = stage("viz", "render the kernel bank as a colour grid PNG")
    viz.add_argument("--bank", type=Path, help="bank file (default <work_dir>/kernels.txt)")
    viz.add_argument("--image", type=Path, help="output PNG (default <work_dir>/kernels.png)")
    viz.add_argument("--cell", type=int, default=8, help="pixels per kernel weight (default 8)")
    stage("calibrate", "find the conv weight scale that gives the target pooling rate")
    stage("eval", "stratified k-fold evaluation of calibration plus classifier training")
    synth = sub.add_parser("synth", help="write a synthetic bars/blobs scene dataset")
    synth.add_argument("--out", type=Path, required=True, help="dataset directory")
    synth.add_argument("--count", type=int, default=450, help="number of scenes (default 450)")
    synth.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    return p


def _config(args) -> pl.PipelineConfig:
    if args.config is not None and not args.config.is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return pl.load_config(args.config, seed=args.seed, folds=args.folds, kernels=args.kernels,
                          work_dir=args.out)


def run(args) -> int:
    if args.command == "synth":
        from .synthetic import write_raw_dataset
        write_raw_dataset(args.out, args.count, args.seed)
        print(f"wrote {args.count} scenes to {args.out}")
        return 0
    cfg = _config(args)
    if args.command == "prep":
        stats = pl.cmd_prep(cfg)
        sys.stdout.write(stats.text())
        return 0
    if args.command == "learn":
        bank = pl.cmd_learn(cfg)
        print(f"wrote {bank.n_kernels} kernels to {cfg.bank_path}")
        return 0
    if args.command == "viz":
        bank_path = args.bank or cfg.bank_path
        out = args.image or cfg.work / "kernels.png"
        pl.cmd_viz(bank_path, out, cell=args.cell)
        print(f"wrote {out}")
        return 0
    if args.command == "calibrate":
        scale, rep = pl.cmd_calibrate(cfg)
        sys.stdout.write(rep.text())
        return 0
    if args.command == "eval":
        rep = pl.cmd_eval(cfg)
        sys.stdout.write(rep.summary())
        return 0 if rep.ok else 1
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (OSError, ValueError, ParamError, BankFormatError, CalibrationError, pl.ConfigError) as exc:
        print(f"csnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
