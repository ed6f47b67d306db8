"""Command line entry point: ``lgrad generate|run|bench|montage``.

Exit codes: 0 success, 1 configuration error, 2 runtime error (results may
be partial).
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext

from .core import ChannelMatrix, ObserverError, read_image_stack
from .experiment import (
    ConfigError,
    emit_channel_montage,
    generate_datasets,
    load_config,
    run_benchmark,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("lgrad")


def _thread_limit(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_generate(args) -> int:
    cfg = _load(args)
    paths = generate_datasets(cfg, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, args.out)
    print(f"{len(summary.results)} result rows, {len(summary.errors)} errors -> {summary.out_dir}")
    return EXIT_RUNTIME if summary.errors else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load(args)
    for rec in run_benchmark(cfg, args.out):
        print(f"{rec.method:10s} N={rec.num_train:6d} D={rec.num_channels:3d} {rec.seconds:.4f} s")
    return EXIT_OK


def cmd_montage(args) -> int:
    stack = read_image_stack(args.input)
    rows = stack.data[: args.count] if args.count else stack.data
    emit_channel_montage(ChannelMatrix(rows), stack.height, stack.width, args.out)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=0, help="BLAS thread limit (0 = library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    cfg_opts = argparse.ArgumentParser(add_help=False)
    cfg_opts.add_argument("--config", required=True, help="experiment INI file")
    cfg_opts.add_argument("--seed", type=int, default=None, help="override the master seed")
    cfg_opts.add_argument("--out", default=None, help="output directory (default: config output)")

    parser = argparse.ArgumentParser(prog="lgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common, cfg_opts], help="write phantom datasets as MOBS files")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("run", parents=[common, cfg_opts], help="run an experiment grid")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("bench", parents=[common, cfg_opts], help="time channel generation")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("montage", parents=[common], help="render channels from a MOBS file as a PGM montage")
    p.add_argument("--input", required=True, help="MOBS file, one channel per image")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.add_argument("--count", type=int, default=0, help="only the first COUNT channels")
    p.set_defaults(func=cmd_montage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ObserverError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
