"""Off-loop execution for CPU-bound tool calls.

One job at a time: concurrent benchmark runs would time each other.
"""

from __future__ import annotations

from typing import Any, Callable

import anyio
from fastmcp.exceptions import ToolError

_CPU_LIMITER = anyio.CapacityLimiter(1)


async def run_cpu(fn: Callable[..., Any], *args: Any) -> Any:
    try:
        return await anyio.to_thread.run_sync(fn, *args, limiter=_CPU_LIMITER)
    except ToolError:
        raise
    except Exception as exc:
        raise ToolError(f"kernel run failed ({type(exc).__name__}: {exc})") from exc
