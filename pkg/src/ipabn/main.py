"""ASGI entrypoint: uvicorn ipabn.main:app --app-dir src"""

import contextlib
import logging
import os

from ipabn.errors import KernelError
from ipabn.server import mcp
from ipabn.services.plan_loader import BUILTIN_PLANS, load_plan

logger = logging.getLogger(__name__)

# Host/Origin checks need FASTMCP_HTTP_ALLOWED_HOSTS; unset leaves them off
_allowed_hosts_configured = bool(os.environ.get("FASTMCP_HTTP_ALLOWED_HOSTS"))

# no session state: tool results depend on arguments only
app = mcp.http_app(
    stateless_http=True,
    host_origin_protection=_allowed_hosts_configured,
)

_fastmcp_lifespan = app.router.lifespan_context


def _warm_caches() -> None:
    """Parse the built-in plans into the plan cache before the first memory_ledger call."""
    for name in BUILTIN_PLANS:
        try:
            load_plan(name)
        except KernelError as exc:
            logger.warning("built-in plan %s did not load: %s", name, exc)


@contextlib.asynccontextmanager
async def _lifespan(application):
    async with _fastmcp_lifespan(application):
        _warm_caches()
        yield


app.router.lifespan_context = _lifespan
