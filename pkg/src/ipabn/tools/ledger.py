"""Memory tool: memory_ledger: saved-for-backward buffers per strategy."""

from fastmcp.exceptions import ToolError

from ipabn.kernels.strategies import compare_strategies, parse_strategy_list
from ipabn.server import mcp
from ipabn.services.plan_loader import BUILTIN_PLANS, load_plan
from ipabn.services.worker import run_cpu
from ipabn.tools.verify import validate_dtype

MAX_SPATIAL = 64


@mcp.tool(
    description=(
        "Reports which input-sized buffers each training-memory strategy keeps from the "
        "forward to the backward pass of a BN+Act(+Conv) block, with byte totals, "
        f"savings relative to the standard strategy and backward pass counts. Plans: {list(BUILTIN_PLANS)}."
    ),
    annotations={
        "title": "Memory Ledger",
        "readOnlyHint": True,
        "destructiveHint": False,
        "openWorldHint": False,
        "idempotentHint": True,
    },
)
async def memory_ledger(
    plan: str = "residual",
    strategies: str = "all",
    batch: int = 2,
    size: int = 8,
    dtype: str = "double",
) -> dict:
    if plan not in BUILTIN_PLANS:
        raise ToolError(f"unknown plan {plan!r}; choose one of {list(BUILTIN_PLANS)}")
    dtype = validate_dtype(dtype)
    chosen = parse_strategy_list(strategies)
    batch = max(1, min(batch, 16))
    size = max(1, min(size, MAX_SPATIAL))
    block = load_plan(plan)
    input_shape = (batch, block.in_channels, size, size)
    rows = await run_cpu(lambda: compare_strategies(block, input_shape, strategies=chosen, dtype=dtype))
    return {"plan": plan, "input_shape": list(input_shape), "dtype": dtype, "strategies": rows}
