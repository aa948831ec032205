"""The inplace-abn MCP app: tool registry, ping and the /health route."""

from fastmcp import FastMCP
from starlette.requests import Request
from starlette.responses import JSONResponse

mcp = FastMCP(
    name="inplace-abn",
    instructions=(
        "In-place activated BatchNorm kernel server. Runs the gradient-equivalence "
        "suite, reports the saved-buffer memory ledger of each training-memory "
        "strategy and times BN+Act+Conv blocks. All results are computed on request; "
        "nothing is estimated."
    ),
    # only KernelError and ToolError text reaches the client
    mask_error_details=True,
)


@mcp.tool(
    description="Liveness check for the in-place ABN kernel server. Answers 'pong'.",
    annotations={
        "title": "Ping",
        "readOnlyHint": True,
        "destructiveHint": False,
        "openWorldHint": False,
        "idempotentHint": True,
    },
)
def ping() -> str:
    return "pong"


@mcp.custom_route("/health", methods=["GET"])
async def health(request: Request) -> JSONResponse:
    return JSONResponse({"status": "healthy"})


# verify, ledger and bench attach their tools to `mcp` at import
from ipabn.tools import bench, ledger, verify  # noqa: E402,F401
