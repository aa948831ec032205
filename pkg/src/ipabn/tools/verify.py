"""Verification tool: run_verification: the property suite behind `ipabn verify`."""

from fastmcp.exceptions import ToolError

from ipabn.server import mcp
from ipabn.services.verify_suite import run_suite
from ipabn.services.worker import run_cpu

DTYPES = ("double", "single")


def validate_dtype(dtype: str) -> str:
    dtype = dtype.strip().lower()
    if dtype not in DTYPES:
        raise ToolError(f"dtype must be one of {list(DTYPES)}, got {dtype!r}")
    return dtype


@mcp.tool(
    description=(
        "Runs the in-place ABN property suite: gradient equivalence of the five memory "
        "strategies (standard, checkpointing, checkpointing_proposed, inplace_abn_i, "
        "inplace_abn_ii), finite-difference checks, activation and affine inversion "
        "round-trips, synchronized statistics, BN folding, memory-ledger counts and "
        "backward pass-count ordering. Each property reports its worst error and tolerance."
    ),
    annotations={
        "title": "Run Verification",
        "readOnlyHint": True,
        "destructiveHint": False,
        "openWorldHint": False,
        "idempotentHint": True,
    },
)
async def run_verification(dtype: str = "double", seed: int = 0) -> dict:
    dtype = validate_dtype(dtype)
    rows = await run_cpu(run_suite, dtype, seed)
    failed = [row["property"] for row in rows if not row["passed"]]
    return {
        "dtype": dtype,
        "seed": seed,
        "passed": not failed,
        "failed": failed,
        "properties": rows,
    }
