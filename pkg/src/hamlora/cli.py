"""Command-line interface: run, sweep, inspect, merge.

Exit codes: 0 success, 2 invalid configuration or input, 3 training
divergence, 1 any other failure (including partially failed sweeps). The
HAMLORA_OUTPUT_DIR environment variable overrides the config's output
directory.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import parse_config, parse_sweep
from .errors import ConfigError, FormatError, HamloraError, InputError, TrainingError
from .merging import MERGE_ALGORITHMS, merge_sources
from .serialization import describe_adapter, load_adapter, save_adapter

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2
EXIT_DIVERGED = 3


def _resolve_outdir(cfg) -> str:
    return os.environ.get("HAMLORA_OUTPUT_DIR", cfg.output_dir)


def _cmd_run(args) -> int:
    from .experiment import run_and_write

    cfg = parse_config(args.config)
    result = run_and_write(cfg, _resolve_outdir(cfg))
    fm = "n/a" if result.fm is None else f"{result.fm:.4f}"
    print(f"strategy={cfg.strategy} AA={result.aa:.4f} FM={fm}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .experiment import run_sweep

    base, grid = parse_sweep(args.config)
    rows, any_failed = run_sweep(base, grid, _resolve_outdir(base))
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep finished: {ok}/{len(rows)} points succeeded")
    return EXIT_FAILURE if any_failed else EXIT_OK


def _cmd_inspect(args) -> int:
    print(describe_adapter(args.adapter))
    return EXIT_OK


def _cmd_merge(args) -> int:
    loaded = [load_adapter(path) for path in args.adapters]
    sources = []
    for i, adapter in enumerate(loaded):
        if not hasattr(adapter, "layers"):
            raise InputError(f"{args.adapters[i]} is a merged delta, not a mergeable adapter")
        alpha = getattr(adapter, "alpha", None)
        if alpha is None:
            alpha = adapter.alpha_g
        source_id = getattr(adapter, "task_id", None)
        if source_id is None:
            source_id = adapter.group_id
        sources.append((source_id, alpha if args.algo == "ham" else 1.0, adapter.layers))
    merged = merge_sources(
        sources,
        args.algo,
        ties_trim_fraction=args.trim_fraction,
        dare_drop_prob=args.drop_prob,
        seed=args.seed,
    )
    save_adapter(args.out, merged)
    print(f"merged {len(sources)} adapters with {args.algo} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamlora",
        description="Continual learning with hierarchically merged low-rank adapters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid from a sweep config")
    p_sweep.add_argument("config")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_inspect = sub.add_parser("inspect", help="describe a serialized adapter file")
    p_inspect.add_argument("adapter")
    p_inspect.set_defaults(func=_cmd_inspect)

    p_merge = sub.add_parser("merge", help="merge serialized adapters into one delta")
    p_merge.add_argument("adapters", nargs="+")
    p_merge.add_argument("--algo", required=True, choices=MERGE_ALGORITHMS)
    p_merge.add_argument("--out", default="merged.ham")
    p_merge.add_argument("--trim-fraction", type=float, default=0.2)
    p_merge.add_argument("--drop-prob", type=float, default=0.5)
    p_merge.add_argument("--seed", type=int, default=0)
    p_merge.set_defaults(func=_cmd_merge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except HamloraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entrypoint() -> None:
    sys.exit(main())
