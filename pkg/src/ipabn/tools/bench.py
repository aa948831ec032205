"""Timing tool: benchmark_block: forward/backward wall time per strategy."""

from ipabn import deps
from ipabn.kernels.strategies import parse_strategy_list
from ipabn.server import mcp
from ipabn.services.bench_runner import SHAPE_SETS, BenchConfig, relative_overhead
from ipabn.services.worker import run_cpu
from ipabn.tools.verify import validate_dtype

MAX_TOOL_REPS = 200
MAX_TOOL_WARMUP = 20


@mcp.tool(
    description=(
        "Times forward and backward passes of BN+Act+Conv blocks under each memory "
        "strategy and reports mean/std microseconds plus the overhead over the standard "
        f"strategy. Shape sets: {sorted(SHAPE_SETS)}. Desk-scale numbers, for comparison only."
    ),
    annotations={
        "title": "Benchmark Block",
        "readOnlyHint": True,
        "destructiveHint": False,
        "openWorldHint": False,
        "idempotentHint": False,
    },
)
async def benchmark_block(
    shapes: str = "tiny",
    strategies: str = "all",
    reps: int = 20,
    warmup: int = 2,
    dtype: str = "double",
) -> dict:
    # ConfigError is a ToolError; its message reaches the client
    config = BenchConfig(
        shapes=shapes,
        strategies=parse_strategy_list(strategies),
        reps=max(1, min(reps, MAX_TOOL_REPS)),
        warmup=max(0, min(warmup, MAX_TOOL_WARMUP)),
        dtype=validate_dtype(dtype),
    )
    table = await run_cpu(deps.bench_runner().run, config)
    return {
        "shapes": shapes,
        "reps": config.reps,
        "warmup": config.warmup,
        "timing": table.to_dict("records"),
        "overhead": relative_overhead(table).to_dict("records"),
    }
