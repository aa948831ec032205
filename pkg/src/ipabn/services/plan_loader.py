"""Declarative block plans: text format parser and a cached loader.

Format, one layer per line:

    <in_channels> <out_channels> <kernel|-> <slope> <strategy> [stride=N] [padding=N] [fixed_gamma=true]

`-` as kernel means BN+Act without a conv (out must equal in). `#` starts a
comment. Directives: `@residual` marks an identity-skip block, `@name <id>`
sets the layer-id prefix. Every layer line must name the same strategy.
"""

from __future__ import annotations

import logging
from importlib import resources
from pathlib import Path

from cachetools import LRUCache

from ipabn.errors import KernelError, PlanError, PlanFileError
from ipabn.kernels.activation import ActivationFn
from ipabn.kernels.strategies import BlockPlan, ConvSpec, LayerSpec, Strategy, validate_plan

logger = logging.getLogger(__name__)

BUILTIN_PLANS = ("bn_act", "bn_act_conv", "residual")
PLAN_CACHE_SIZE = 64

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

_cache: LRUCache = LRUCache(maxsize=PLAN_CACHE_SIZE)


def _parse_int(token: str, what: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise PlanFileError(f"line {lineno}: {what} must be an integer, got {token!r}") from None


def _parse_layer(tokens: list[str], lineno: int) -> tuple[LayerSpec, Strategy]:
    if len(tokens) < 5:
        raise PlanFileError(
            f"line {lineno}: expected '<in> <out> <kernel|-> <slope> <strategy> [key=value...]', "
            f"got {len(tokens)} fields"
        )
    in_channels = _parse_int(tokens[0], "in_channels", lineno)
    out_channels = _parse_int(tokens[1], "out_channels", lineno)
    try:
        slope = float(tokens[3])
    except ValueError:
        raise PlanFileError(f"line {lineno}: slope must be a number, got {tokens[3]!r}") from None
    try:
        strategy = Strategy.parse(tokens[4])
    except PlanError as exc:
        raise PlanFileError(f"line {lineno}: {exc}") from None

    options: dict[str, str] = {}
    for token in tokens[5:]:
        key, sep, value = token.partition("=")
        if not sep or key not in ("stride", "padding", "fixed_gamma"):
            raise PlanFileError(f"line {lineno}: unknown option {token!r}; use stride=, padding= or fixed_gamma=")
        options[key] = value

    fixed = options.get("fixed_gamma", "false").lower()
    if fixed not in _TRUE | _FALSE:
        raise PlanFileError(f"line {lineno}: fixed_gamma must be true or false, got {fixed!r}")

    try:
        activation = ActivationFn.leaky_relu(slope)
        conv = None
        if tokens[2] == "-":
            if out_channels != in_channels:
                raise PlanFileError(f"line {lineno}: a layer without conv keeps its {in_channels} channels, got out={out_channels}")
            if "stride" in options or "padding" in options:
                raise PlanFileError(f"line {lineno}: stride/padding need a conv kernel")
        else:
            conv = ConvSpec(
                out_channels,
                _parse_int(tokens[2], "kernel", lineno),
                _parse_int(options.get("stride", "1"), "stride", lineno),
                _parse_int(options["padding"], "padding", lineno) if "padding" in options else None,
            )
        return LayerSpec(in_channels, activation, conv, fixed in _TRUE), strategy
    except PlanFileError:
        raise
    except KernelError as exc:
        raise PlanFileError(f"line {lineno}: {exc}") from None


def parse_plan(text: str, strategy_override: Strategy | str | None = None, *, name: str = "block") -> BlockPlan:
    layers: list[LayerSpec] = []
    strategies: set[Strategy] = set()
    residual = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "@residual":
            residual = True
        elif tokens[0] == "@name":
            if len(tokens) != 2:
                raise PlanFileError(f"line {lineno}: @name takes exactly one identifier")
            name = tokens[1]
        elif tokens[0].startswith("@"):
            raise PlanFileError(f"line {lineno}: unknown directive {tokens[0]!r}")
        else:
            layer, strategy = _parse_layer(tokens, lineno)
            layers.append(layer)
            strategies.add(strategy)
    if not layers:
        raise PlanFileError("plan has no layer lines")
    if len(strategies) > 1:
        raise PlanFileError(f"all layers must share one strategy, got {sorted(s.value for s in strategies)}")

    plan = BlockPlan(tuple(layers), strategies.pop(), residual, name)
    try:
        validate_plan(plan)
    except PlanError as exc:
        raise PlanFileError(str(exc)) from None
    if strategy_override is not None:
        plan = plan.with_strategy(strategy_override)
    return plan


def _unreadable(name_or_path: str, exc: Exception) -> PlanFileError:
    return PlanFileError(
        f"cannot read plan {name_or_path!r} ({type(exc).__name__}); "
        f"give a readable file or one of {list(BUILTIN_PLANS)}"
    )


def _source_key(name_or_path: str) -> tuple:
    if name_or_path in BUILTIN_PLANS:
        return ("builtin", name_or_path)
    path = Path(name_or_path)
    try:
        stat = path.stat()
        return (str(path.resolve()), stat.st_mtime_ns, stat.st_size)
    except OSError as exc:
        raise _unreadable(name_or_path, exc) from exc


def _read_text(name_or_path: str) -> str:
    try:
        if name_or_path in BUILTIN_PLANS:
            return resources.files("ipabn.plans").joinpath(f"{name_or_path}.plan").read_text(encoding="utf-8")
        return Path(name_or_path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise _unreadable(name_or_path, exc) from exc


def load_plan(name_or_path: str, strategy_override: Strategy | str | None = None) -> BlockPlan:
    """Built-in plan name or path to a plan file. Parsed plans are cached by
    path and modification time; the override is applied after the cache."""
    key = _source_key(name_or_path)
    plan = _cache.get(key)
    if plan is None:
        plan = parse_plan(_read_text(name_or_path), name=Path(name_or_path).stem)
        _cache[key] = plan
        logger.debug("parsed plan %s: %d layers, residual=%s", name_or_path, len(plan.layers), plan.residual)
    else:
        logger.debug("plan cache hit for %s", name_or_path)
    if strategy_override is not None:
        plan = plan.with_strategy(strategy_override)
    return plan


def clear_cache() -> None:
    _cache.clear()
