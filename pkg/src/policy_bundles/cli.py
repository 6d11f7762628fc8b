"""Command-line entry point.

    policy-bundles COMMAND --config run.json [overrides]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError, NumericalError
from .pipeline import COMMANDS, StageError, load_config, run_command

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


def _lags(text):
    try:
        lags = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"lags must be comma-separated integers: {text!r}") from None
    if not lags:
        raise argparse.ArgumentTypeError("empty lag list")
    return lags


def _k(text):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"k must be an integer or 'auto': {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policy-bundles", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--k", type=_k, help="cluster count, or 'auto' for the elbow suggestion")
    p.add_argument("--lags", type=_lags, help="cluster lags for the main model, e.g. 1 or 1,2,3")
    p.add_argument("--binary-mode", choices=("symmetric", "asymmetric"))
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed for the synth command")
    p.add_argument("--workers", type=int, help="threads for pairwise dissimilarities")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(
            args.config, k=args.k, lags=args.lags, binary_mode=args.binary_mode,
            start_year=args.start_year, end_year=args.end_year, out=args.out,
            seed=args.seed, workers=args.workers,
        )
        run_command(args.command, cfg)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e.error)
    except (ConfigError, DataError, NumericalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _code(e)
    return 0


def _code(error) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
