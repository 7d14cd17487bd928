"""``domainmine`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import experiments as ex
from .config import RunConfig
from .errors import ConfigError, DomainMineError, TrainingError
from .profiler import DEFAULT_PROFILE_BATCH

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _parse_m_values(text):
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers such as 2,4,8, got {text!r}") from None


def _config_args(p):
    p.add_argument("config", type=Path, help="run config (YAML)")
    p.add_argument(
        "-o",
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path override, e.g. training.seed=7 (repeatable)",
    )
    p.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")


def _checkpoint_args(p):
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--split", default="test", help="train, val, test or all (default: test)")
    p.add_argument("--out", type=Path, help="output directory (default: next to the checkpoint)")


def build_parser():
    parser = argparse.ArgumentParser(prog="domainmine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history, metrics and manifest")
    _config_args(p)
    p.add_argument("--no-straight-through", action="store_true", help="decoder reads the code only (ablation)")
    p.add_argument("--dmm-warmup-batches", type=int, metavar="B", help="route every sample to domain 0 for B batches")

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a data split or CSV file")
    _checkpoint_args(p)
    p.add_argument("--csv", type=Path, help="evaluate on this CSV instead of the checkpoint's own data")
    p.add_argument("--label-column", default="label")

    p = sub.add_parser("export-domains", help="per-sample domain ids plus a 2-D PCA projection")
    _checkpoint_args(p)
    p.add_argument("--stage", choices=("pre", "post"), default="post", help="project z (pre) or z_e (post)")
    p.add_argument("--with-latents", action="store_true", help="append z_e coordinates to domains.csv")

    p = sub.add_parser("profile", help="FLOPs / parameter table incl. the FLOPs-matched plain MLP")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("config", type=Path, nargs="?")
    src.add_argument("--checkpoint", type=Path)
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--batch", type=int, default=DEFAULT_PROFILE_BATCH, help="samples per forward pass (default 4096)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sweep-m", help="train one model per codebook size and compare")
    _config_args(p)
    p.add_argument("--m-values", type=_parse_m_values, required=True, help="e.g. 2,4,8")
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="run N trainings concurrently")
    return parser


def _load_run(args, extra=()):
    run = RunConfig.load(args.config, list(args.override) + list(extra))
    if getattr(args, "out", None) is not None:
        run.output_dir = args.out
    return run


def cmd_train(args):
    extra = []
    if args.no_straight_through:
        extra.append("model.straight_through=false")
    if args.dmm_warmup_batches is not None:
        extra.append(f"training.dmm_warmup_batches={args.dmm_warmup_batches}")
    run = _load_run(args, extra)
    res = ex.train_run(run, plots=not args.no_plots)
    print(json.dumps({"output_dir": str(res.out.root), **res.metrics}, indent=2, sort_keys=True))


def cmd_evaluate(args):
    report, _ = ex.evaluate_checkpoint(args.checkpoint, args.split, args.csv, args.label_column, args.out)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_export_domains(args):
    _, out = ex.export_domains(args.checkpoint, args.stage, args.split, args.out, args.with_latents, not args.no_plots)
    print(f"wrote {', '.join(out.files)} to {out.root}")


def cmd_profile(args):
    if args.batch < 1:
        raise ConfigError("--batch must be >= 1")
    run = None if args.config is None else RunConfig.load(args.config, args.override)
    _, table, _ = ex.profile(run, args.batch, args.checkpoint, args.out, not args.no_plots)
    print(table, end="")


def cmd_sweep_m(args):
    run = _load_run(args)
    rows, _ = ex.sweep_m(run, args.m_values, args.parallel, args.out, not args.no_plots)
    print(ex.sweep_table(rows), end="")


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-domains": cmd_export_domains,
    "profile": cmd_profile,
    "sweep-m": cmd_sweep_m,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DomainMineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
