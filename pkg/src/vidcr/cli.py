"""Command-line driver: launch, restart, bench.

Output is line-oriented key=value text; exit code 0 on success and 1 on
any runtime error (the error class name is printed on the error= line).
"""

from __future__ import annotations

import argparse
import sys

from .backends import BACKENDS
from .errors import Error
from .harness import bench_translation, launch, restart_cmd


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidcr")
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("launch", help="run a mini-app")
    pl.add_argument("--app", required=True)
    pl.add_argument("--ranks", type=int, required=True)
    pl.add_argument("--backend", required=True, choices=sorted(BACKENDS))
    pl.add_argument("--ckpt-after", type=int, action="append", default=None,
                    metavar="K", help="checkpoint after K completed steps (repeatable)")
    pl.add_argument("--ckpt-dir", default=None)
    pl.add_argument("--no-ckpt-exit", action="store_true",
                    help="keep running after a checkpoint instead of exiting")
    pl.add_argument("--ckpt-external-delay-ms", type=float, default=None,
                    help="post an external checkpoint trigger after this delay")
    pl.add_argument("--seed", type=int, default=0)

    pr = sub.add_parser("restart", help="resume from checkpoint images")
    pr.add_argument("--ckpt-dir", required=True)
    pr.add_argument("--backend", required=True, choices=sorted(BACKENDS))

    pb = sub.add_parser("bench", help="translation overhead micro-benchmark")
    pb.add_argument("--iters", type=int, required=True)
    pb.add_argument("--backend", required=True, choices=sorted(BACKENDS))
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "launch":
            delay = args.ckpt_external_delay_ms
            report = launch(
                args.app,
                args.ranks,
                args.backend,
                ckpt_after=args.ckpt_after,
                ckpt_dir=args.ckpt_dir,
                seed=args.seed,
                exit_after_ckpt=not args.no_ckpt_exit,
                external_delay=None if delay is None else delay / 1000.0,
            )
        elif args.command == "restart":
            report = restart_cmd(args.ckpt_dir, args.backend)
        else:
            report = bench_translation(args.iters, args.backend)
    except (Error, ValueError, OSError) as e:
        print("status=error")
        print(f"error={type(e).__name__}")
        print(f"msg={e}")
        return 1
    for line in report.lines():
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
