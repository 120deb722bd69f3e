"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data or I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, parse_config_text
from .data import DataError, SynthSpecError
from .fedcore import ConfigError, NonFiniteUpdate
from .harness import cmd_diagnose_similarity, cmd_generate_data, cmd_sweep, cmd_train
from .params import LayoutError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrecsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic corpus as MIND TSV files")
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="run one experiment over the configured seeds")
    train.add_argument("--config")
    train.add_argument("--seed", type=int, action="append",
                       help="override run.seeds (repeatable)")
    train.add_argument("--out")

    sweep = sub.add_parser("sweep", help="run train for each value of one config key")
    sweep.add_argument("--config")
    sweep.add_argument("--axis", required=True, help="config key, e.g. attack.malicious_ratio")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out", required=True)

    diag = sub.add_parser("diagnose-similarity", help="Pearson r of news similarities across checkpoints")
    diag.add_argument("checkpoint_a")
    diag.add_argument("checkpoint_b")
    diag.add_argument("--config")
    diag.add_argument("--pairs", type=int, default=10000)
    diag.add_argument("--seed", type=int, default=0)
    diag.add_argument("--out")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            news, behaviors = cmd_generate_data(_config(args.config), args.seed, args.out)
            print(f"wrote {news} and {behaviors}")
        elif args.command == "train":
            cfg = _config(args.config)
            if args.seed:
                cfg.run.seeds = list(args.seed)
            summary = cmd_train(cfg, args.out)
            print(f"auc {summary['auc_mean']:.4f} +/- {summary['auc_std']:.4f} over {summary['seeds']} seed(s)")
        elif args.command == "sweep":
            text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            if values:
                parse_config_text(text).set(args.axis, values[0])
            for row in cmd_sweep(text, args.axis, values, args.out):
                print(f"{args.axis}={row['value']}: auc {row['auc_mean']:.4f} +/- {row['auc_std']:.4f}")
        elif args.command == "diagnose-similarity":
            r = cmd_diagnose_similarity(args.checkpoint_a, args.checkpoint_b, _config(args.config),
                                        args.pairs, args.seed, args.out)
            print(f"{r:.4f}")
    except (ConfigError, SynthSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LayoutError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteUpdate, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
