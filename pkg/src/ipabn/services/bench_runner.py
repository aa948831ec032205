"""Forward/backward timing of BN+Act+Conv blocks per strategy, plus the
instrumented pass counts that stand in for wall-clock ordering.

Wall-clock numbers are reported, never asserted: at desk scale they are
dominated by numpy dispatch, not by the memory traffic the strategies trade.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from ipabn.errors import ConfigError
from ipabn.kernels import tensor_core as tc
from ipabn.kernels.activation import ActivationFn
from ipabn.kernels.strategies import (
    ALL_STRATEGIES,
    BlockPlan,
    ConvSpec,
    LayerSpec,
    Strategy,
    block_backward,
    block_forward,
    block_output_shape,
    compare_strategies,
    init_block_params,
)

logger = logging.getLogger(__name__)

DEFAULT_WARMUP = 10
DEFAULT_REPS = 200
TIMING_COLUMNS = ["shape", "strategy", "phase", "mean_us", "std_us", "reps"]
PASS_COLUMNS = ["shape", "strategy", "backward_passes", "backward_elements", "recompute_passes", "forward_passes"]
PHASES = ("forward", "backward", "total")


@dataclass(frozen=True)
class BlockShape:
    name: str
    n: int
    c: int
    h: int
    w: int
    kernel: int

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return self.n, self.c, self.h, self.w

    def plan(self, strategy: Strategy = Strategy.STANDARD) -> BlockPlan:
        layer = LayerSpec(self.c, ActivationFn.leaky_relu(), ConvSpec(self.c, self.kernel))
        return BlockPlan((layer,), strategy, name=self.name)


# Channel counts are 1/8 of a deep residual network's four stages, at 32x32.
SHAPE_SETS: dict[str, tuple[BlockShape, ...]] = {
    "mini": (
        BlockShape("conv1-mini", 2, 32, 32, 32, 3),
        BlockShape("conv2-mini", 2, 64, 32, 32, 3),
        BlockShape("conv3-mini", 2, 128, 32, 32, 1),
        BlockShape("conv4-mini", 2, 256, 32, 32, 1),
    ),
    "tiny": (
        BlockShape("tiny-3x3", 2, 4, 8, 8, 3),
        BlockShape("tiny-1x1", 2, 8, 4, 4, 1),
    ),
}


def resolve_shapes(name: str) -> tuple[BlockShape, ...]:
    if name in SHAPE_SETS:
        return SHAPE_SETS[name]
    for shapes in SHAPE_SETS.values():
        for shape in shapes:
            if shape.name == name:
                return (shape,)
    known = sorted(SHAPE_SETS) + [s.name for shapes in SHAPE_SETS.values() for s in shapes]
    raise ConfigError(f"unknown shape set or shape {name!r}; known: {known}")


@dataclass(frozen=True)
class BenchConfig:
    shapes: str = "mini"
    strategies: tuple[Strategy, ...] = ALL_STRATEGIES
    reps: int = DEFAULT_REPS
    warmup: int = DEFAULT_WARMUP
    dtype: str = "double"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.reps}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        resolve_shapes(self.shapes)
        try:
            tc.resolve_dtype(self.dtype)
        except Exception as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class BenchRunner:
    """Times forward, backward and total per (shape, strategy) cell.

    clock returns nanoseconds; tests swap in a deterministic one.
    """

    clock: Callable[[], int] = field(default=time.perf_counter_ns)

    def time_cell(self, shape: BlockShape, strategy: Strategy, config: BenchConfig) -> list[dict]:
        rng = np.random.default_rng(config.seed)
        plan = shape.plan(strategy)
        params = init_block_params(plan, rng, config.dtype, random_affine=True)
        storage = tc.resolve_dtype(config.dtype)
        x = rng.standard_normal(shape.input_shape).astype(storage)
        dL_dout = rng.standard_normal(block_output_shape(params, x.shape)).astype(storage)

        samples = []
        for rep in range(config.warmup + config.reps):
            t0 = self.clock()
            result = block_forward(plan, x, params)
            t1 = self.clock()
            block_backward(plan, result.saved, dL_dout, params)
            t2 = self.clock()
            if rep >= config.warmup:
                samples.append((t1 - t0, t2 - t1, t2 - t0))
        rows = []
        for phase, column in zip(PHASES, np.asarray(samples, dtype=np.float64).T / 1000.0):
            rows.extend({"shape": shape.name, "strategy": strategy.value, "phase": phase, "us": us} for us in column)
        return rows

    def run(self, config: BenchConfig) -> pd.DataFrame:
        rows = []
        for shape in resolve_shapes(config.shapes):
            for strategy in config.strategies:
                cell = self.time_cell(shape, strategy, config)
                total = [r["us"] for r in cell if r["phase"] == "total"]
                logger.info("bench %s/%s: total %.1f us mean over %d reps", shape.name, strategy.value, np.mean(total), len(total))
                rows.extend(cell)
        samples = pd.DataFrame(rows)
        table = (
            samples.groupby(["shape", "strategy", "phase"], sort=False)["us"]
            .agg(mean_us="mean", std_us=lambda s: float(np.std(s.to_numpy())), reps="count")
            .reset_index()
        )
        return table[TIMING_COLUMNS]


def relative_overhead(table: pd.DataFrame, baseline: Strategy = Strategy.STANDARD) -> pd.DataFrame:
    """Total-time overhead of every strategy over the baseline, in percent."""
    totals = table[table["phase"] == "total"].set_index(["shape", "strategy"])["mean_us"]
    rows = []
    for (shape, strategy), mean_us in totals.items():
        base = totals.get((shape, baseline.value))
        if base is None or base == 0:
            continue
        rows.append({"shape": shape, "strategy": strategy, "overhead_pct": round(100.0 * (mean_us / base - 1.0), 2)})
    return pd.DataFrame(rows, columns=["shape", "strategy", "overhead_pct"])


def pass_count_table(
    shapes: Sequence[BlockShape],
    strategies: Sequence[Strategy] = ALL_STRATEGIES,
    dtype: str = "double",
    seed: int = 0,
    *,
    scale_batch: int | None = None,
) -> pd.DataFrame:
    """Instrumented pass and element counts per shape and strategy.

    Counts do not depend on tensor values, so scale_batch lets callers run a
    reduced batch of the same channel and spatial layout.
    """
    rows = []
    for shape in shapes:
        n = scale_batch if scale_batch is not None else shape.n
        input_shape = (n, shape.c, shape.h, shape.w)
        for row in compare_strategies(shape.plan(), input_shape, strategies=strategies, dtype=dtype, seed=seed):
            rows.append({"shape": shape.name, **{k: row[k] for k in PASS_COLUMNS[1:]}})
    return pd.DataFrame(rows, columns=PASS_COLUMNS)
