"""BN+Act(+Conv) blocks under the five training-memory strategies.

What each strategy keeps across the forward/backward boundary (large buffers
are input-sized tensors; mu_B/sigma_B are small per-channel vectors):

  standard                 x, z          + mu_B, sigma_B
  checkpointing            x             + mu_B, sigma_B   (recomputes y, z with one scale-and-shift)
  checkpointing_proposed   xhat          + sigma_B         (recomputes z = phi(pi(xhat)), BN* backward)
  inplace_abn_i            z             + sigma_B         (y = phi^-1(z), xhat = pi^-1(y), BN*)
  inplace_abn_ii           z             + sigma_B         (y = phi^-1(z), BN-dagger)

Outputs and gradients agree across strategies up to rounding; only storage and
recomputation differ. Saved state is opaque and consumed by one backward pass:
the in-place variants recover y and xhat over the stored z.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ipabn.errors import LedgerError, NonInvertibleActivationError, PlanError, ShapeError, StrategyMismatchError
from ipabn.kernels import tensor_core as tc
from ipabn.kernels.activation import ActivationFn, act_backward_from_output, act_forward, act_inverse
from ipabn.kernels.batchnorm import (
    BNGradients,
    ChannelParams,
    MinibatchStats,
    RunningStats,
    bn_backward_dagger,
    bn_backward_standard,
    bn_backward_star,
    bn_forward,
    bn_forward_into,
    bn_inference,
    fused_scale_shift,
    pi_forward,
    pi_inverse,
)
from ipabn.kernels.conv import ConvGradients, ConvParams, conv_backward, conv_forward


class Strategy(StrEnum):
    STANDARD = "standard"
    CHECKPOINTING = "checkpointing"
    CHECKPOINTING_PROPOSED = "checkpointing_proposed"
    INPLACE_ABN_I = "inplace_abn_i"
    INPLACE_ABN_II = "inplace_abn_ii"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        """Accepts any spelling up to case, '_' and '-' (InPlaceABN_I, inplace-abn-i, ...)."""
        key = name.strip().lower().replace("_", "").replace("-", "")
        for strategy in cls:
            if strategy.value.replace("_", "") == key:
                return strategy
        raise PlanError(f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}")

    @property
    def requires_invertible_activation(self) -> bool:
        return self in (Strategy.CHECKPOINTING_PROPOSED, Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II)

    @property
    def requires_gamma_guard(self) -> bool:
        return self in (Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II)

    @property
    def keeps_mean(self) -> bool:
        return self in (Strategy.STANDARD, Strategy.CHECKPOINTING)


ALL_STRATEGIES: tuple[Strategy, ...] = tuple(Strategy)


def parse_strategy_list(spec: str) -> tuple[Strategy, ...]:
    """Parse "all" or a comma-separated list of strategy names."""
    if spec.strip().lower() == "all":
        return ALL_STRATEGIES
    names = [name for name in spec.split(",") if name.strip()]
    if not names:
        raise PlanError("give at least one strategy name, or 'all'")
    return tuple(dict.fromkeys(Strategy.parse(name) for name in names))


# -- plans and parameters ----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None

    def __post_init__(self) -> None:
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise PlanError(f"conv needs out_channels, kernel and stride >= 1: {self}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        elif self.padding < 0:
            raise PlanError(f"conv padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    activation: ActivationFn = field(default_factory=ActivationFn)
    conv: ConvSpec | None = None
    fixed_gamma: bool = False

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels if self.conv else self.channels


@dataclass(frozen=True)
class BlockPlan:
    layers: tuple[LayerSpec, ...]
    strategy: Strategy = Strategy.STANDARD
    residual: bool = False
    name: str = "block"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def in_channels(self) -> int:
        return self.layers[0].channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def with_strategy(self, strategy: Strategy | str) -> "BlockPlan":
        if isinstance(strategy, str):
            strategy = Strategy.parse(strategy)
        return replace(self, strategy=strategy)

    def layer_id(self, index: int) -> str:
        return f"{self.name}.{index}"


@dataclass(frozen=True)
class UnitParams:
    bn: ChannelParams
    conv: ConvParams | None = None


def validate_plan(plan: BlockPlan, params: Sequence[UnitParams] | None = None) -> None:
    if not plan.layers:
        raise PlanError(f"plan {plan.name!r} has no layers")
    for i, layer in enumerate(plan.layers):
        if layer.channels < 1:
            raise PlanError(f"{plan.layer_id(i)}: channel count must be >= 1")
        if plan.strategy.requires_invertible_activation and not layer.activation.invertible:
            raise PlanError(
                f"{plan.layer_id(i)}: {plan.strategy.value} needs an invertible activation, "
                f"got {layer.activation.describe()}; use leaky_relu with slope > 0"
            )
        if i + 1 < len(plan.layers) and layer.out_channels != plan.layers[i + 1].channels:
            raise PlanError(
                f"{plan.layer_id(i)} produces {layer.out_channels} channels, "
                f"{plan.layer_id(i + 1)} expects {plan.layers[i + 1].channels}"
            )
    if plan.residual and plan.in_channels != plan.out_channels:
        raise PlanError(
            f"residual plan {plan.name!r} maps {plan.in_channels} to {plan.out_channels} channels; "
            "the identity skip needs them equal"
        )
    if params is None:
        return
    if len(params) != len(plan.layers):
        raise PlanError(f"plan {plan.name!r} has {len(plan.layers)} layers, got {len(params)} parameter sets")
    for i, (layer, unit) in enumerate(zip(plan.layers, params)):
        if unit.bn.channels != layer.channels:
            raise PlanError(f"{plan.layer_id(i)}: BN parameters for {unit.bn.channels} channels, plan says {layer.channels}")
        if (unit.conv is None) != (layer.conv is None):
            raise PlanError(f"{plan.layer_id(i)}: conv parameters {'missing' if unit.conv is None else 'unexpected'}")
        if layer.conv is not None:
            spec, conv = layer.conv, unit.conv
            if conv.weights.shape != (spec.out_channels, layer.channels, spec.kernel, spec.kernel):
                raise PlanError(f"{plan.layer_id(i)}: conv weights {conv.weights.shape} do not match {spec}")
        if plan.strategy.requires_gamma_guard:
            unit.bn.require_invertible()


def init_block_params(
    plan: BlockPlan,
    rng: np.random.Generator,
    dtype: str = "double",
    *,
    random_affine: bool = False,
) -> list[UnitParams]:
    """He-normal conv weights; gamma=1, beta=0 unless random_affine.

    random_affine draws |gamma| in [0.1, 2] with random sign, beta in [-1, 1]
    and small conv biases, for equivalence testing.
    """
    storage = tc.resolve_dtype(dtype)
    params = []
    for layer in plan.layers:
        c = layer.channels
        if random_affine:
            gamma = np.ones(c) if layer.fixed_gamma else rng.uniform(0.1, 2.0, c) * rng.choice([-1.0, 1.0], c)
            bn = ChannelParams(gamma, rng.uniform(-1.0, 1.0, c), fixed_gamma=layer.fixed_gamma)
        else:
            bn = ChannelParams.identity(c, fixed_gamma=layer.fixed_gamma)
        conv = None
        if layer.conv is not None:
            spec = layer.conv
            fan_in = c * spec.kernel * spec.kernel
            weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.out_channels, c, spec.kernel, spec.kernel))
            bias = rng.uniform(-0.1, 0.1, spec.out_channels) if random_affine else np.zeros(spec.out_channels)
            conv = ConvParams(
                weights.astype(storage),
                bias.astype(storage),
                (spec.stride, spec.stride),
                (spec.padding, spec.padding),
            )
        params.append(UnitParams(bn, conv))
    return params


# -- memory ledger ---------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    layer: str
    name: str
    elements: int
    nbytes: int
    large: bool


@dataclass
class BufferLedger:
    """Tensors retained across the forward/backward boundary.

    A tensor shared by two layers (a unit's z is the next unit's x when no conv
    sits between them) is recorded once, under the first layer that keeps it.
    """

    entries: list[LedgerEntry] = field(default_factory=list)
    _seen: set[int] = field(default_factory=set, repr=False)

    def record(self, layer: str, name: str, array: np.ndarray, *, large: bool) -> bool:
        if any(e.layer == layer and e.name == name for e in self.entries):
            raise LedgerError(f"buffer {name!r} recorded twice for layer {layer}")
        if id(array) in self._seen:
            return False
        self._seen.add(id(array))
        self.entries.append(LedgerEntry(layer, name, int(array.size), int(array.nbytes), large))
        return True

    def reserve(self, layer: str, name: str, elements: int, itemsize: int) -> None:
        """Tally a small per-channel buffer that has no array yet (gradient accumulators)."""
        self.entries.append(LedgerEntry(layer, name, elements, elements * itemsize, False))

    @property
    def saved_large_buffers(self) -> int:
        return sum(1 for e in self.entries if e.large)

    @property
    def large_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries if e.large)

    @property
    def small_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries if not e.large)

    @property
    def peak_bytes(self) -> int:
        return self.large_bytes + self.small_bytes


def ledger_report(ledger: BufferLedger, reference: BufferLedger | None = None) -> dict:
    """Per-layer and total retained bytes, with savings against a reference ledger
    (normally the Standard strategy on the same plan)."""
    reference = reference if reference is not None else ledger
    layers: dict[str, dict] = {}
    for entry in ledger.entries:
        row = layers.setdefault(
            entry.layer, {"layer": entry.layer, "large_buffers": 0, "large_bytes": 0, "small_bytes": 0, "buffers": []}
        )
        row["buffers"].append(entry.name)
        if entry.large:
            row["large_buffers"] += 1
            row["large_bytes"] += entry.nbytes
        else:
            row["small_bytes"] += entry.nbytes

    def saving(mine: int, theirs: int) -> float:
        return round(100.0 * (1.0 - mine / theirs), 2) if theirs else 0.0

    return {
        "layers": list(layers.values()),
        "saved_large_buffers": ledger.saved_large_buffers,
        "large_bytes": ledger.large_bytes,
        "small_bytes": ledger.small_bytes,
        "total_bytes": ledger.peak_bytes,
        "reference_large_buffers": reference.saved_large_buffers,
        "buffer_saving_pct": saving(ledger.saved_large_buffers, reference.saved_large_buffers),
        "byte_saving_pct": saving(ledger.peak_bytes, reference.peak_bytes),
    }


# -- fused in-place layer (forward / backward pseudocode) ---------------------------


def inplace_abn_forward(
    x: np.ndarray,
    p: ChannelParams,
    f: ActivationFn,
    *,
    overwrite_input: bool = False,
) -> tuple[np.ndarray, MinibatchStats]:
    """y, sigma <- BN(x); z <- phi(y); backward needs only z and sigma.

    With overwrite_input=True, x, y and z share x's storage. The returned
    statistics still carry mu_B for running-stat updates; backward ignores it.
    """
    if not f.invertible:
        raise NonInvertibleActivationError(f"in-place ABN needs an invertible activation, got {f.describe()}")
    p.require_invertible()
    buffer = x if overwrite_input else tc.empty_like(x)
    y, stats = bn_forward_into(x, p, buffer)
    return act_forward(f, y, out=y), stats


def inplace_abn_backward(
    z: np.ndarray,
    dL_dz: np.ndarray,
    stats: MinibatchStats,
    p: ChannelParams,
    f: ActivationFn,
    variant: Strategy = Strategy.INPLACE_ABN_I,
    out: np.ndarray | None = None,
) -> BNGradients:
    """Recover y (and xhat for variant I) over z, then BN* or BN-dagger. z is overwritten."""
    if variant not in (Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II):
        raise StrategyMismatchError(f"{variant.value} is not an in-place variant")
    dL_dy = act_backward_from_output(f, z, dL_dz, out=out)
    with tc.section("recompute"):
        y = act_inverse(f, z, out=z)
        if variant is Strategy.INPLACE_ABN_I:
            xhat = pi_inverse(y, p, out=y)
    if variant is Strategy.INPLACE_ABN_I:
        return bn_backward_star(xhat, dL_dy, stats, p, out=dL_dy)
    return bn_backward_dagger(y, dL_dy, stats, p, out=dL_dy)


# -- blocks ----------------------------------------------------------------------


@dataclass
class SavedUnit:
    strategy: Strategy
    layer: str
    buffers: dict[str, np.ndarray]
    stats: MinibatchStats
    consumed: bool = False


@dataclass
class BlockSaved:
    strategy: Strategy
    plan_name: str
    units: list[SavedUnit]
    residual: bool


class BlockForward(NamedTuple):
    out: np.ndarray
    saved: BlockSaved
    ledger: BufferLedger


@dataclass(frozen=True)
class UnitGradients:
    dL_dgamma: np.ndarray
    dL_dbeta: np.ndarray
    dL_dweights: np.ndarray | None = None
    dL_dbias: np.ndarray | None = None


@dataclass(frozen=True)
class BlockGradients:
    units: tuple[UnitGradients, ...]

    def as_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        flat = {}
        for i, unit in enumerate(self.units):
            for name in ("dL_dgamma", "dL_dbeta", "dL_dweights", "dL_dbias"):
                value = getattr(unit, name)
                if value is not None:
                    flat[f"{prefix}{i}.{name}"] = value
        return flat


StatsHook = Callable[[int, MinibatchStats], None]


def _unit_forward(
    strategy: Strategy,
    layer_id: str,
    layer: LayerSpec,
    unit: UnitParams,
    x: np.ndarray,
    ledger: BufferLedger,
) -> tuple[np.ndarray, SavedUnit, MinibatchStats]:
    f = layer.activation
    if strategy is Strategy.STANDARD:
        y, _, stats = bn_forward(x, unit.bn)
        z = act_forward(f, y, out=y)
        buffers = {"x": x, "z": z}
    elif strategy is Strategy.CHECKPOINTING:
        y, stats = bn_forward_into(x, unit.bn, tc.empty_like(x))
        z = act_forward(f, y, out=y)
        buffers = {"x": x}
    elif strategy is Strategy.CHECKPOINTING_PROPOSED:
        y, xhat, stats = bn_forward(x, unit.bn)
        z = act_forward(f, y, out=y)
        buffers = {"xhat": xhat}
    else:
        z, stats = inplace_abn_forward(x, unit.bn, f)
        buffers = {"z": z}

    kept = stats if strategy.keeps_mean else stats.without_mean()
    for name, array in buffers.items():
        ledger.record(layer_id, name, array, large=True)
    if kept.mu is not None:
        ledger.record(layer_id, "mu_B", kept.mu, large=False)
    ledger.record(layer_id, "sigma_B", kept.var, large=False)
    ledger.reserve(layer_id, "dgamma_dbeta_acc", 2 * layer.channels, np.dtype(np.float64).itemsize)

    out = conv_forward(z, unit.conv) if unit.conv is not None else z
    return out, SavedUnit(strategy, layer_id, buffers, kept), stats


def _recover_z(saved: SavedUnit, layer: LayerSpec, unit: UnitParams) -> np.ndarray:
    f = layer.activation
    if saved.strategy is Strategy.CHECKPOINTING:
        with tc.section("recompute"):
            scale, shift = fused_scale_shift(saved.stats, unit.bn)
            z = tc.channel_affine(saved.buffers["x"], scale, shift)
            return act_forward(f, z, out=z)
    if saved.strategy is Strategy.CHECKPOINTING_PROPOSED:
        with tc.section("recompute"):
            z = pi_forward(saved.buffers["xhat"], unit.bn)
            return act_forward(f, z, out=z)
    return saved.buffers["z"]


def _unit_backward(
    saved: SavedUnit,
    layer: LayerSpec,
    unit: UnitParams,
    dL_dout: np.ndarray,
) -> tuple[np.ndarray, UnitGradients]:
    if saved.consumed:
        raise StrategyMismatchError(f"saved state of {saved.layer} was already consumed by a backward pass")
    saved.consumed = True
    f = layer.activation
    z = _recover_z(saved, layer, unit)

    conv_grads: ConvGradients | None = None
    if unit.conv is not None:
        conv_grads = conv_backward(z, unit.conv, dL_dout)
        dL_dz, dz_out = conv_grads.dL_dz, conv_grads.dL_dz
    else:
        dL_dz, dz_out = dL_dout, None

    if saved.strategy in (Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II):
        grads = inplace_abn_backward(z, dL_dz, saved.stats, unit.bn, f, saved.strategy, out=dz_out)
    else:
        dL_dy = act_backward_from_output(f, z, dL_dz, out=dz_out)
        if saved.strategy is Strategy.CHECKPOINTING_PROPOSED:
            grads = bn_backward_star(saved.buffers["xhat"], dL_dy, saved.stats, unit.bn, out=dL_dy)
        else:
            grads = bn_backward_standard(saved.buffers["x"], dL_dy, saved.stats, unit.bn, out=dL_dy)

    return grads.dL_dx, UnitGradients(
        grads.dL_dgamma,
        grads.dL_dbeta,
        conv_grads.dL_dweights if conv_grads else None,
        conv_grads.dL_dbias if conv_grads else None,
    )


def block_forward(
    plan: BlockPlan,
    x: np.ndarray,
    params: Sequence[UnitParams],
    *,
    on_stats: StatsHook | None = None,
    ledger: BufferLedger | None = None,
) -> BlockForward:
    """Run the block; on_stats(unit_index, batch_stats) sees full statistics
    (including mu_B) for running-stat updates, whatever the strategy keeps.

    Pass a ledger to accumulate several blocks into one account.

    Under in-place strategies a final unit without conv returns its saved z
    as `out`; block_backward overwrites it, so copy `out` first if it is
    needed after the backward pass.
    """
    validate_plan(plan, params)
    ledger = ledger if ledger is not None else BufferLedger()
    units = []
    h = x
    for i, (layer, unit) in enumerate(zip(plan.layers, params)):
        h, saved, stats = _unit_forward(plan.strategy, plan.layer_id(i), layer, unit, h, ledger)
        units.append(saved)
        if on_stats is not None:
            on_stats(i, stats)
    if plan.residual:
        if h.shape != x.shape:
            raise ShapeError(f"residual plan {plan.name!r}: skip {x.shape} vs block output {h.shape}")
        h = tc.add(h, x)
    return BlockForward(h, BlockSaved(plan.strategy, plan.name, units, plan.residual), ledger)


def block_backward(
    plan: BlockPlan,
    saved: BlockSaved,
    dL_dout: np.ndarray,
    params: Sequence[UnitParams],
) -> tuple[np.ndarray, BlockGradients]:
    if saved.strategy is not plan.strategy or saved.plan_name != plan.name:
        raise StrategyMismatchError(
            f"saved state from {saved.plan_name!r}/{saved.strategy.value} "
            f"cannot drive backward of {plan.name!r}/{plan.strategy.value}"
        )
    if len(saved.units) != len(plan.layers):
        raise StrategyMismatchError(f"saved state has {len(saved.units)} units, plan has {len(plan.layers)}")
    g = dL_dout
    unit_grads: list[UnitGradients] = []
    for i in reversed(range(len(plan.layers))):
        g, grads = _unit_backward(saved.units[i], plan.layers[i], params[i], g)
        unit_grads.append(grads)
    if saved.residual:
        g = tc.add(g, dL_dout)
    return g, BlockGradients(tuple(reversed(unit_grads)))


def block_inference(
    plan: BlockPlan,
    x: np.ndarray,
    params: Sequence[UnitParams],
    running: Sequence[RunningStats],
) -> np.ndarray:
    validate_plan(plan.with_strategy(Strategy.STANDARD), params)
    h = x
    for layer, unit, stats in zip(plan.layers, params, running, strict=True):
        z = bn_inference(h, unit.bn, stats)
        act_forward(layer.activation, z, out=z)
        h = conv_forward(z, unit.conv) if unit.conv is not None else z
    return tc.add(h, x) if plan.residual else h


# -- residual stacks ---------------------------------------------------------------


class StackForward(NamedTuple):
    out: np.ndarray
    saved: list[BlockSaved]
    ledger: BufferLedger


def residual_stack_forward(
    plans: Sequence[BlockPlan],
    x: np.ndarray,
    params: Sequence[Sequence[UnitParams]],
    *,
    on_stats: Callable[[int, int, MinibatchStats], None] | None = None,
) -> StackForward:
    if len(plans) != len(params):
        raise PlanError(f"{len(plans)} plans but {len(params)} parameter lists")
    names = [plan.name for plan in plans]
    if len(set(names)) != len(names):
        raise PlanError(f"block names in a stack must be distinct, got {names}")
    ledger = BufferLedger()
    saved = []
    h = x
    for b, (plan, block_params) in enumerate(zip(plans, params)):
        hook = (lambda i, s, b=b: on_stats(b, i, s)) if on_stats else None
        h, block_saved, _ = block_forward(plan, h, block_params, on_stats=hook, ledger=ledger)
        saved.append(block_saved)
    return StackForward(h, saved, ledger)


def residual_stack_backward(
    plans: Sequence[BlockPlan],
    saved: Sequence[BlockSaved],
    dL_dout: np.ndarray,
    params: Sequence[Sequence[UnitParams]],
) -> tuple[np.ndarray, list[BlockGradients]]:
    g = dL_dout
    grads: list[BlockGradients] = []
    for plan, block_saved, block_params in reversed(list(zip(plans, saved, params, strict=True))):
        g, block_grads = block_backward(plan, block_saved, g, block_params)
        grads.append(block_grads)
    return g, list(reversed(grads))


# -- profiling ---------------------------------------------------------------------


def strategy_profile(
    plan: BlockPlan,
    params: Sequence[UnitParams],
    x: np.ndarray,
    dL_dout: np.ndarray,
) -> dict:
    """Forward + backward under the pass counter.

    scratch_allocations counts output-sized buffers the forward allocated
    beyond the saved ones and the residual sum.
    """
    with tc.counting() as forward:
        result = block_forward(plan, x, params)
    out = result.out.copy()
    with tc.counting() as backward:
        dL_dx, grads = block_backward(plan, result.saved, dL_dout, params)
    fresh_saved = sum(1 for unit in result.saved.units for name in unit.buffers if name != "x")
    return {
        "strategy": plan.strategy.value,
        "out": out,
        "dL_dx": dL_dx,
        "grads": grads,
        "ledger": result.ledger,
        "forward": forward.snapshot(),
        "backward": backward.snapshot(),
        "scratch_allocations": forward.allocations - fresh_saved - (1 if plan.residual else 0),
    }


def compare_strategies(
    plan: BlockPlan,
    input_shape: tuple[int, int, int, int],
    *,
    strategies: Sequence[Strategy] = ALL_STRATEGIES,
    dtype: str = "double",
    seed: int = 0,
) -> list[dict]:
    """Ledger report and pass counts per strategy, savings relative to Standard."""
    rng = np.random.default_rng(seed)
    params = init_block_params(plan, rng, dtype, random_affine=True)
    storage = tc.resolve_dtype(dtype)
    x = rng.standard_normal(input_shape).astype(storage)
    dL_dout = rng.standard_normal(block_output_shape(params, x.shape, plan.residual)).astype(storage)
    reference = strategy_profile(plan.with_strategy(Strategy.STANDARD), params, x.copy(), dL_dout)
    rows = []
    for strategy in strategies:
        if strategy is Strategy.STANDARD:
            profile = reference
        else:
            profile = strategy_profile(plan.with_strategy(strategy), params, x.copy(), dL_dout)
        report = ledger_report(profile["ledger"], reference["ledger"])
        rows.append(
            {
                "strategy": strategy.value,
                **{k: report[k] for k in (
                    "saved_large_buffers", "large_bytes", "small_bytes", "total_bytes",
                    "buffer_saving_pct", "byte_saving_pct",
                )},
                "backward_passes": profile["backward"]["passes"],
                "backward_elements": profile["backward"]["elements"],
                "recompute_passes": profile["backward"]["recompute_passes"],
                "forward_passes": profile["forward"]["passes"],
                "scratch_allocations": profile["scratch_allocations"],
                "layers": report["layers"],
            }
        )
    return rows


def block_output_shape(
    params: Sequence[UnitParams], input_shape: tuple[int, ...], residual: bool = False
) -> tuple[int, int, int, int]:
    shape = tuple(input_shape)
    for unit in params:
        if unit.conv is not None:
            shape = unit.conv.output_shape(shape)
    if residual and shape != tuple(input_shape):
        raise ShapeError(f"residual block maps {tuple(input_shape)} to {shape}")
    return shape
