"""Command line entry point: ``impairnet {paths|diffusion|marl} --config FILE``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import ConfigError, load_config
from .runner import run

OUTPUT_ENV = "IMPAIRNET_OUTPUT_DIR"
DEFAULT_OUTPUT = "results"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impairnet", description=__doc__)
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind, help_text in (
        ("paths", "expected path counts on random graphs vs Monte Carlo"),
        ("diffusion", "diffusion LMS with an impaired node"),
        ("marl", "multi-agent Q-learning with a broken agent"),
    ):
        p = sub.add_parser(kind, help=help_text)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help=f"output directory (default: config, ${OUTPUT_ENV}, or '{DEFAULT_OUTPUT}')")
        p.add_argument("--jobs", type=int, help="worker processes (overrides the config)")
    return parser


def _fail(report: dict, code: int) -> int:
    print(json.dumps(report, indent=2), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.kind!r}", key="kind")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be >= 0", key="seed")
            cfg = replace(cfg, seed=args.seed)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("jobs must be >= 1", key="jobs")
            cfg = replace(cfg, jobs=args.jobs)
    except ConfigError as exc:
        return _fail(exc.report(), 2)
    except OSError as exc:
        return _fail({"error": type(exc).__name__, "message": f"cannot read {args.config}: {exc.strerror or exc}"}, 2)

    out_dir = args.out or cfg.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    try:
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                bundle = run(cfg, out_dir, pool.map)
        else:
            bundle = run(cfg, out_dir)
    except Exception as exc:  # reported, not swallowed: nonzero exit
        return _fail({"error": type(exc).__name__, "message": str(exc), "kind": cfg.kind}, 1)
    print(json.dumps({"output_dir": str(out_dir), "metrics": bundle.summary["metrics"]}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
