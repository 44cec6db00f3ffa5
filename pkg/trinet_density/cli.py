"""Batch command line: ``python cli.py train|eval|sample|check|grid [options]``.

Report values go to stdout as ``key=value`` lines. A failure prints one line
``error category=<category> <message>`` to stderr and exits with the category's code
(1 check, 2 io, 3 config, 4 format, 5 numeric).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from commands import run_command
from config import COMMANDS, build_run_config
from errors import CheckFailedError, TriNetError


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    """Subcommand parser; every subcommand accepts the same option groups.

    Returns:
        argparse.ArgumentParser: The ``trinet`` parser.
    """
    common = argparse.ArgumentParser(add_help=False)
    data = common.add_argument_group("data")
    data.add_argument("--data", type=Path, nargs="+", default=[], help="Data file(s)")
    data.add_argument(
        "--format", dest="data_format", choices=["csv", "idx", "cifar"], default="csv"
    )
    data.add_argument("--header", action="store_true", help="Skip the first CSV line")
    data.add_argument("--take", dest="n_take", type=int, help="Use only the first N records")
    data.add_argument("--val-frac", dest="validation_frac", type=float, default=0.1)
    data.add_argument("--test-frac", dest="test_frac", type=float, default=0.1)
    data.add_argument(
        "--lambda", dest="lambda_", help="Logit squeeze: a number, 'mnist', 'cifar' or 'none'"
    )
    data.add_argument("--dequant-seed", type=int, default=0)

    model = common.add_argument_group("model")
    model.add_argument("--block-size", type=int, default=4)
    model.add_argument("--layers", dest="n_layers", type=int, default=4)
    model.add_argument("--nonlinearity", choices=["tanh", "log"], default="log")
    model.add_argument("--flip", type=_on_off, default=True, metavar="on|off")
    model.add_argument("--model", type=Path, help="Model file to evaluate, sample or check")
    model.add_argument("--resume", type=Path, help="Continue training from a model file")

    train = common.add_argument_group("training")
    train.add_argument("--lr", dest="lr0", type=float, default=1e-4)
    train.add_argument("--batch", dest="batch_size", type=int, default=64)
    train.add_argument("--l1", dest="l1_eta", type=float, default=0.0)
    train.add_argument("--patience", dest="patience_epochs", type=int, default=10)
    train.add_argument("--lr-decay", type=float, default=0.1)
    train.add_argument("--min-lr", type=float, default=1e-7)
    train.add_argument("--max-epochs", type=int, default=100)
    train.add_argument(
        "--augment-shift",
        type=float,
        default=0.0,
        help="Max circular shift as a fraction of the side",
    )
    train.add_argument("--workers", type=int, default=1)
    train.add_argument(
        "--nondeterministic",
        dest="deterministic_reduction",
        action="store_false",
        help="Reduce worker gradients in completion order",
    )
    train.add_argument("--seed", type=int, default=0)

    out = common.add_argument_group("outputs")
    out.add_argument(
        "--out", type=Path, help="Output directory (train) or output CSV (sample, grid)"
    )
    out.add_argument(
        "--split", dest="eval_split", choices=["train", "validation", "test"], default="test"
    )
    out.add_argument("--count", type=int, default=100)
    out.add_argument("--tol", type=float, default=1e-10)
    out.add_argument("--range", dest="grid_range", type=float, nargs="+", default=[])
    out.add_argument("--resolution", type=int, default=100)
    out.add_argument("--eps", dest="check_eps", type=float, default=1e-5)
    out.add_argument("--max-coords", dest="check_max_coords", type=int, default=2000)

    parser = argparse.ArgumentParser(
        prog="trinet", description="Density estimation with monotonic triangular network flows"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fit a model and save it with its history",
        "eval": "mean NLL (and bpd) of a saved model",
        "sample": "draw samples from a saved model",
        "check": "verify gradients, log-determinants and inversion",
        "grid": "log-density on a 1D/2D lattice",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand.

    Args:
        argv (list[str] | None): Arguments without the program name; ``sys.argv`` when None.

    Returns:
        int: Process exit code.
    """
    args = build_parser().parse_args(argv)
    values = {k: v for k, v in vars(args).items() if v is not None}
    try:
        cfg = build_run_config(**values)
        report = run_command(cfg)
    except CheckFailedError as exc:
        _print_values(exc.values)
        print(f"error category={exc.category} {exc}", file=sys.stderr)
        return exc.exit_code
    except TriNetError as exc:
        print(f"error category={exc.category} {exc}", file=sys.stderr)
        return exc.exit_code

    _print_values(report.values)
    return 0


def _print_values(values: dict[str, object]) -> None:
    for key, value in values.items():
        print(f"{key}={value}")


if __name__ == "__main__":
    sys.exit(main())
