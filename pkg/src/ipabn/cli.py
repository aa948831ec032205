"""`ipabn` command line: verify, bench, train, ledger.

Machine-readable output goes to stdout or --out; logs go to stderr.
Exit codes: 0 success, 1 verification failure or divergence, 2 usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import pandas as pd

from ipabn import deps
from ipabn.errors import ConfigError, DatasetError, DivergenceError, KernelError, PlanFileError
from ipabn.kernels.strategies import Strategy, compare_strategies, parse_strategy_list
from ipabn.services.bench_runner import DEFAULT_REPS, DEFAULT_WARMUP, BenchConfig, pass_count_table, relative_overhead, resolve_shapes
from ipabn.services.plan_loader import load_plan
from ipabn.services.trainer import DEFAULT_LR, SGD_MOMENTUM, WEIGHT_DECAY, TrainConfig, Trainer
from ipabn.services.verify_suite import run_suite

logger = logging.getLogger("ipabn.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

# first match wins
ERROR_EXIT_CODES: tuple[tuple[type[BaseException], int], ...] = (
    (PlanFileError, EXIT_IO),
    (DatasetError, EXIT_IO),
    (DivergenceError, EXIT_FAILED),
    (KernelError, EXIT_USAGE),
    (OSError, EXIT_IO),
)

VERIFY_COLUMNS = ["property", "passed", "max_error", "tolerance", "detail"]
LEDGER_COLUMNS = [
    "strategy",
    "saved_large_buffers",
    "large_bytes",
    "small_bytes",
    "total_bytes",
    "buffer_saving_pct",
    "byte_saving_pct",
    "backward_passes",
    "recompute_passes",
]


def exit_code_for(exc: BaseException) -> int:
    for kind, code in ERROR_EXIT_CODES:
        if isinstance(exc, kind):
            return code
    raise exc


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    Path(out).write_text(text, encoding="utf-8")


def _table_text(table: pd.DataFrame, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(table.to_dict("records"), indent=2) + "\n"
    return table.to_csv(index=False, lineterminator="\n")


# -- commands ----------------------------------------------------------------------


def cmd_verify(args: argparse.Namespace) -> int:
    rows = run_suite(args.dtype, args.seed, args.perturb_dagger)
    _emit(_table_text(pd.DataFrame(rows, columns=VERIFY_COLUMNS), args.format), args.out)
    failed = [row["property"] for row in rows if not row["passed"]]
    if failed:
        logger.error("verification failed: %s", ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = BenchConfig(
        shapes=args.shapes,
        strategies=parse_strategy_list(args.strategy),
        reps=args.reps,
        warmup=args.warmup,
        dtype=args.dtype,
        seed=args.seed,
    )
    table = deps.bench_runner().run(config)
    overhead = relative_overhead(table)
    for row in overhead.to_dict("records"):
        logger.info("%s %s: %+.2f%% total time over standard", row["shape"], row["strategy"], row["overhead_pct"])
    if args.format == "json":
        passes = pass_count_table(resolve_shapes(config.shapes), config.strategies, config.dtype, config.seed)
        payload = {
            "timing": table.to_dict("records"),
            "overhead": overhead.to_dict("records"),
            "passes": passes.to_dict("records"),
        }
        _emit(json.dumps(payload, indent=2) + "\n", args.out)
    else:
        _emit(_table_text(table, "csv"), args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig(
        dataset=args.dataset,
        epochs=args.epochs,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        strategy=Strategy.parse(args.strategy),
        seed=args.seed,
        dtype=args.dtype,
    )
    result = Trainer(deps.dataset_loader()).run(config)
    if args.format == "json":
        _emit(json.dumps(result.to_json(), indent=2) + "\n", args.out)
    else:
        _emit(_table_text(result.epochs, "csv"), args.out)
    return EXIT_OK


def _parse_shape(text: str) -> tuple[int, int, int, int]:
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"input shape must be four integers n,c,h,w, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise ConfigError(f"input shape must be four positive integers n,c,h,w, got {text!r}")
    return dims


def cmd_ledger(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    if args.input:
        input_shape = _parse_shape(args.input)
    else:
        input_shape = (2, plan.in_channels, 8, 8)
    rows = compare_strategies(
        plan, input_shape, strategies=parse_strategy_list(args.strategy), dtype=args.dtype, seed=args.seed
    )
    if args.format == "json":
        payload = {"plan": plan.name, "input_shape": list(input_shape), "strategies": rows}
        _emit(json.dumps(payload, indent=2) + "\n", args.out)
    else:
        _emit(_table_text(pd.DataFrame(rows)[LEDGER_COLUMNS], "csv"), args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dtype", choices=["single", "double"], default="double")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--format", choices=["csv", "json"], default="csv")

    parser = argparse.ArgumentParser(prog="ipabn", description="In-place activated BatchNorm kernels and harness")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug (stderr)")
    commands = parser.add_subparsers(dest="command", required=True)

    verify = commands.add_parser("verify", parents=[common], help="run the property suite")
    verify.add_argument("--perturb-dagger", type=float, default=0.0, metavar="X",
                        help="scale BN-dagger dL/dx by (1+X); the suite must then fail")
    verify.set_defaults(handler=cmd_verify)

    bench = commands.add_parser("bench", parents=[common], help="time forward/backward per strategy")
    bench.add_argument("--strategy", default="all", help="strategy name, comma list or 'all'")
    bench.add_argument("--shapes", default="mini", help="shape set (mini, tiny) or a single shape name")
    bench.add_argument("--reps", type=int, default=DEFAULT_REPS)
    bench.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    bench.set_defaults(handler=cmd_bench)

    train = commands.add_parser("train", parents=[common], help="train the residual mini-network")
    train.add_argument("--strategy", default="standard")
    train.add_argument("--dataset", default="synthetic", help="'synthetic[:k=v,...]', a file path or an http(s) URL")
    train.add_argument("--epochs", type=int, default=5)
    train.add_argument("--lr", type=float, default=DEFAULT_LR)
    train.add_argument("--momentum", type=float, default=SGD_MOMENTUM)
    train.add_argument("--weight-decay", type=float, default=WEIGHT_DECAY)
    train.add_argument("--batch-size", type=int, default=32)
    train.set_defaults(handler=cmd_train)

    ledger = commands.add_parser("ledger", parents=[common], help="saved-buffer report per strategy")
    ledger.add_argument("--plan", default="residual", help="built-in plan name or plan file")
    ledger.add_argument("--strategy", default="all")
    ledger.add_argument("--input", help="input shape n,c,h,w (default 2,<channels>,8,8)")
    ledger.set_defaults(handler=cmd_ledger)
    return parser


def _configure_logging(verbose: int) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = os.environ.get("IPABN_LOG_LEVEL", "WARNING").upper()
        if level not in logging.getLevelNamesMapping():
            level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _configure_logging(args.verbose)
    try:
        return args.handler(args)
    except (KernelError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error("%s", exc)
        return code
