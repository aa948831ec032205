"""Property suite behind `ipabn verify`: cross-strategy gradient equivalence,
finite differences, inversion round-trips, shard merging, folding, memory
ledger counts and pass-count ordering.

Every property returns one row {property, passed, max_error, tolerance,
detail}. The finite-difference property always runs in double precision.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import replace
from typing import Callable

import numpy as np

from ipabn.kernels import tensor_core as tc
from ipabn.kernels.activation import ActivationFn, act_forward, act_inverse
from ipabn.kernels.batchnorm import (
    ChannelParams,
    RunningStats,
    batch_stats,
    bn_backward_dagger,
    bn_backward_standard,
    bn_backward_star,
    bn_forward,
    bn_inference,
    fold_into_conv,
    inject_dagger_fault,
    pi_forward,
    pi_inverse,
    shard_stats,
    sync_stats,
)
from ipabn.kernels.conv import ConvParams, conv_forward
from ipabn.kernels.gradcheck import check_arrays, check_equivalence, check_gradients, fd_gradient
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
from ipabn.services.bench_runner import SHAPE_SETS, pass_count_table
from ipabn.services.plan_loader import load_plan

logger = logging.getLogger(__name__)

ROUND_TRIP_SLOPES = (0.01, 0.1, 0.5)
# cross-strategy tolerance per storage dtype
EQUIVALENCE_TOL = {"double": 1e-9, "single": 1e-3}
BN_FORMULA_TOL = {"double": 1e-10, "single": 1e-4}
FOLD_TOL = {"double": 1e-12, "single": 1e-5}
SYNC_TOL = 1e-12
FD_TOL = 1e-5
FD_STEP = 1e-5
# minimum |y| so no finite-difference step crosses the activation kink
FD_KINK_MARGIN = 1e-3

EQUIVALENCE_INSTANCES = 100
RESIDUAL_INSTANCES = 10
FD_INSTANCES = 20
SYNC_INSTANCES = 50
ROUND_TRIP_INSTANCES = 20


def _flag(name: str, passed: bool, max_error: float = 0.0, tolerance: float = 0.0, detail: str = "") -> dict:
    return {"property": name, "passed": bool(passed), "max_error": float(max_error), "tolerance": float(tolerance), "detail": detail}


def _signed_gamma(rng: np.random.Generator, c: int) -> np.ndarray:
    return rng.uniform(0.1, 2.0, c) * rng.choice([-1.0, 1.0], c)


def random_unit_plan(rng: np.random.Generator, strategy: Strategy = Strategy.STANDARD) -> tuple[BlockPlan, tuple]:
    """A BN+Act+Conv unit with random channels, kernel and slope; shapes up to (4, 8, 8, 8)."""
    n = int(rng.integers(2, 5))
    c = int(rng.integers(1, 9))
    h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    layer = LayerSpec(
        c,
        ActivationFn.leaky_relu(float(rng.choice(ROUND_TRIP_SLOPES))),
        ConvSpec(int(rng.integers(1, 9)), int(rng.choice([1, 3]))),
    )
    return BlockPlan((layer,), strategy, name="unit"), (n, c, h, w)


def random_bottleneck_plan(rng: np.random.Generator, strategy: Strategy = Strategy.STANDARD) -> tuple[BlockPlan, tuple]:
    """1x1 -> 3x3 -> 1x1 bottleneck with an identity shortcut, c in {4, 6, 8}."""
    c = int(rng.choice([4, 6, 8]))
    inner = c // 2
    act = ActivationFn.leaky_relu(float(rng.choice(ROUND_TRIP_SLOPES)))
    layers = (
        LayerSpec(c, act, ConvSpec(inner, 1)),
        LayerSpec(inner, act, ConvSpec(inner, 3)),
        LayerSpec(inner, act, ConvSpec(c, 1)),
    )
    shape = (int(rng.integers(2, 4)), c, int(rng.integers(3, 7)), int(rng.integers(3, 7)))
    return BlockPlan(layers, strategy, residual=True, name="bottleneck"), shape


def check_gradient_equivalence(
    dtype: str, seed: int, instances: int = EQUIVALENCE_INSTANCES, residual_instances: int = RESIDUAL_INSTANCES
) -> dict:
    """All five strategies against Standard on random BN+Act+Conv units and
    residual bottlenecks."""
    rng = np.random.default_rng(seed)
    storage = tc.resolve_dtype(dtype)
    tol = EQUIVALENCE_TOL[dtype]
    worst = None
    cases = [random_unit_plan(rng) for _ in range(instances)]
    cases += [random_bottleneck_plan(rng) for _ in range(residual_instances)]
    for plan, shape in cases:
        params = init_block_params(plan, rng, dtype, random_affine=True)
        x = rng.standard_normal(shape).astype(storage)
        dL_dout = rng.standard_normal(block_output_shape(params, shape, plan.residual)).astype(storage)
        reference = None
        for strategy in ALL_STRATEGIES:
            run_plan = plan.with_strategy(strategy)
            result = block_forward(run_plan, x, params)
            dL_dx, grads = block_backward(run_plan, result.saved, dL_dout, params)
            flat = {"dL_dx": dL_dx, **grads.as_dict()}
            if reference is None:
                reference = flat
                continue
            report = check_gradients(reference, flat, tol, f"{strategy.value}")
            if worst is None or report.max_rel_error > worst.max_rel_error:
                worst = report
    detail = f"{instances} units, {residual_instances} bottlenecks; worst {worst.name} at {worst.worst_index}"
    return _flag("gradient_equivalence", worst.passed, worst.max_rel_error, tol, detail)


def check_bn_formulas(dtype: str, seed: int, instances: int = EQUIVALENCE_INSTANCES) -> dict:
    """BN-standard, BN* and BN-dagger on the same random inputs."""
    rng = np.random.default_rng(seed + 1)
    storage = tc.resolve_dtype(dtype)
    tol = BN_FORMULA_TOL[dtype]
    worst_error, worst_detail, passed = 0.0, "", True
    for _ in range(instances):
        shape = (int(rng.integers(2, 5)), int(rng.integers(1, 9)), int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        x = rng.standard_normal(shape).astype(storage)
        g = rng.standard_normal(shape).astype(storage)
        p = ChannelParams(_signed_gamma(rng, shape[1]), rng.uniform(-1, 1, shape[1]))
        y, xhat, stats = bn_forward(x, p)
        standard = bn_backward_standard(x, g, stats, p)
        for name, other in (
            ("star", bn_backward_star(xhat, g, stats.without_mean(), p)),
            ("dagger", bn_backward_dagger(y, g, stats.without_mean(), p)),
        ):
            report = check_equivalence(standard, other, tol, name)
            passed &= report.passed
            if report.max_rel_error >= worst_error:
                worst_error, worst_detail = report.max_rel_error, f"worst: {name} {report.worst_index}"
    return _flag("bn_backward_formulas", passed, worst_error, tol, f"{instances} instances; {worst_detail}")


def _unit_loss(plan: BlockPlan, params, weights: np.ndarray) -> Callable[[np.ndarray], float]:
    def loss(x: np.ndarray) -> float:
        result = block_forward(plan, x, params)
        return float(np.sum(result.out * weights))

    return loss


# gradient key -> (UnitParams field, parameter field)
FD_PARAMETERS = {
    "dL_dgamma": ("bn", "gamma"),
    "dL_dbeta": ("bn", "beta"),
    "dL_dweights": ("conv", "weights"),
    "dL_dbias": ("conv", "bias"),
}


def _parameter_loss(
    plan: BlockPlan, params, x: np.ndarray, weights: np.ndarray, owner: str, field: str
) -> Callable[[np.ndarray], float]:
    unit = params[0]

    def loss(value: np.ndarray) -> float:
        part = replace(getattr(unit, owner), **{field: value})
        result = block_forward(plan, x, [replace(unit, **{owner: part})])
        return float(np.sum(result.out * weights))

    return loss


def check_finite_differences(seed: int, instances: int = FD_INSTANCES) -> dict:
    """Analytic dL/dx, dL/dgamma, dL/dbeta and conv weight and bias gradients
    of sum(out * R) through BN -> LeakyReLU -> Conv against central
    differences. Batch statistics are recomputed for every shifted input."""
    rng = np.random.default_rng(seed + 2)
    worst = None
    drawn = 0
    while drawn < instances:
        c = int(rng.integers(1, 4))
        shape = (2, c, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        layer = LayerSpec(c, ActivationFn.leaky_relu(float(rng.choice(ROUND_TRIP_SLOPES))), ConvSpec(int(rng.integers(1, 4)), 3))
        plan = BlockPlan((layer,), Strategy.STANDARD, name="fd")
        params = init_block_params(plan, rng, "double", random_affine=True)
        x = rng.standard_normal(shape)
        y, _, _ = bn_forward(x, params[0].bn)
        if np.min(np.abs(y)) < FD_KINK_MARGIN:
            continue
        drawn += 1
        weights = rng.standard_normal(block_output_shape(params, shape))
        result = block_forward(plan, x, params)
        dL_dx, grads = block_backward(plan, result.saved, weights, params)
        analytic = {"dL_dx": dL_dx, **grads.as_dict()}
        numeric = {"dL_dx": fd_gradient(_unit_loss(plan, params, weights), x, FD_STEP)}
        for key, (owner, field) in FD_PARAMETERS.items():
            value = getattr(getattr(params[0], owner), field)
            numeric[f"0.{key}"] = fd_gradient(_parameter_loss(plan, params, x, weights, owner, field), value, FD_STEP)
        report = check_gradients(analytic, numeric, FD_TOL, "finite_differences")
        if worst is None or report.max_rel_error > worst.max_rel_error:
            worst = report
    detail = f"{instances} instances, step {FD_STEP:g}, double; worst at {worst.worst_index}"
    return _flag("finite_differences", worst.passed, worst.max_rel_error, FD_TOL, detail)


def check_round_trips(dtype: str, seed: int, instances: int = ROUND_TRIP_INSTANCES) -> list[dict]:
    """phi^-1(phi(y)) and pi^-1(pi(xhat)) against a 4*eps bound scaled by the
    magnitudes each rounding step sees. max_error is error/bound."""
    rng = np.random.default_rng(seed + 3)
    storage = tc.resolve_dtype(dtype)
    eps = tc.machine_eps(dtype)
    act_ratio, pi_ratio = 0.0, 0.0
    for _ in range(instances):
        shape = (2, int(rng.integers(1, 6)), 4, 4)
        y = (rng.standard_normal(shape) * 3).astype(storage)
        for slope in ROUND_TRIP_SLOPES:
            f = ActivationFn.leaky_relu(slope)
            back = act_inverse(f, act_forward(f, y))
            bound = 4 * eps * np.maximum(np.abs(y.astype(np.float64)), np.finfo(storage).tiny)
            act_ratio = max(act_ratio, float(np.max(np.abs(back.astype(np.float64) - y) / bound)))

        p = ChannelParams(_signed_gamma(rng, shape[1]), rng.uniform(-1, 1, shape[1]))
        xhat = rng.standard_normal(shape).astype(storage)
        y_pi = pi_forward(xhat, p)
        back = pi_inverse(y_pi, p)
        gamma = np.abs(p.gamma).reshape(1, -1, 1, 1)
        beta = np.abs(p.beta).reshape(1, -1, 1, 1)
        scale = np.abs(xhat) + (np.abs(y_pi) + beta) / gamma
        bound = 4 * eps * np.maximum(scale, np.finfo(storage).tiny)
        pi_ratio = max(pi_ratio, float(np.max(np.abs(back.astype(np.float64) - xhat) / bound)))
    return [
        _flag("activation_round_trip", act_ratio <= 1.0, act_ratio, 1.0, f"slopes {ROUND_TRIP_SLOPES}, error / (4 eps |y|)"),
        _flag("pi_round_trip", pi_ratio <= 1.0, pi_ratio, 1.0, "|gamma| >= 0.1, error / (4 eps scaled bound)"),
    ]


def check_sync_stats(dtype: str, seed: int, instances: int = SYNC_INSTANCES) -> dict:
    rng = np.random.default_rng(seed + 4)
    storage = tc.resolve_dtype(dtype)
    worst = 0.0
    for _ in range(instances):
        x = (rng.standard_normal((int(rng.integers(4, 9)), int(rng.integers(1, 6)), 3, 3)) + rng.normal()).astype(storage)
        whole = batch_stats(x)
        for k in (2, 4):
            merged = sync_stats(shard_stats(x, k))
            for a, b in ((whole.mu, merged.mu), (whole.var, merged.var)):
                worst = max(worst, check_arrays(a, b, SYNC_TOL).max_rel_error)
    return _flag("sync_stats", worst <= SYNC_TOL, worst, SYNC_TOL, f"{instances} tensors, k in (2, 4)")


def check_fold(dtype: str, seed: int) -> dict:
    rng = np.random.default_rng(seed + 5)
    storage = tc.resolve_dtype(dtype)
    tol = FOLD_TOL[dtype]
    worst = 0.0
    for kernel in (1, 3):
        for _ in range(5):
            c_in, c_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            conv = ConvParams(
                rng.standard_normal((c_out, c_in, kernel, kernel)).astype(storage),
                rng.standard_normal(c_out).astype(storage),
                padding=(kernel // 2, kernel // 2),
            )
            p = ChannelParams(_signed_gamma(rng, c_out), rng.uniform(-1, 1, c_out))
            r = RunningStats(rng.normal(0, 1, c_out), rng.uniform(0.5, 2.0, c_out))
            x = rng.standard_normal((2, c_in, 5, 5)).astype(storage)
            direct = bn_inference(conv_forward(x, conv), p, r)
            weights, bias = fold_into_conv(conv.weights, conv.bias, r, p)
            folded = conv_forward(x, ConvParams(weights, bias, conv.stride, conv.padding))
            worst = max(worst, check_arrays(direct, folded, tol).max_rel_error)
    return _flag("fold_into_conv", worst <= tol, worst, tol, "1x1 and 3x3, 5 cases each")


def check_ledger_counts(seed: int) -> list[dict]:
    rows = []
    unit = {r["strategy"]: r for r in compare_strategies(load_plan("bn_act_conv"), (2, 16, 6, 6), seed=seed)}
    expected = {s.value: (2 if s is Strategy.STANDARD else 1) for s in ALL_STRATEGIES}
    got = {name: row["saved_large_buffers"] for name, row in unit.items()}
    rows.append(_flag("ledger_unit", got == expected, detail=f"large buffers {got}"))

    bn_act = {r["strategy"]: r for r in compare_strategies(load_plan("bn_act"), (2, 16, 4, 4), seed=seed)}
    pair = (bn_act["standard"]["saved_large_buffers"], bn_act["inplace_abn_i"]["saved_large_buffers"])
    rows.append(_flag("ledger_bn_act", pair == (2, 1), detail=f"standard vs inplace_abn_i: {pair[0]} vs {pair[1]}"))

    residual = {r["strategy"]: r for r in compare_strategies(load_plan("residual"), (2, 16, 6, 6), seed=seed)}
    pair = (residual["standard"]["saved_large_buffers"], residual["inplace_abn_i"]["saved_large_buffers"])
    saving = residual["inplace_abn_i"]["buffer_saving_pct"]
    rows.append(_flag("ledger_residual", pair == (6, 3) and saving == 50.0, detail=f"{pair[0]} vs {pair[1]} buffers, {saving}% saving"))

    c, cp = unit["checkpointing"], unit["checkpointing_proposed"]
    rows.append(
        _flag(
            "ledger_checkpointing_recompute",
            c["saved_large_buffers"] == cp["saved_large_buffers"] and c["recompute_passes"] > cp["recompute_passes"],
            detail=f"buffers {c['saved_large_buffers']} / {cp['saved_large_buffers']}, "
            f"recompute passes {c['recompute_passes']} / {cp['recompute_passes']}",
        )
    )
    scratch = max(unit[s]["scratch_allocations"] for s in ("inplace_abn_i", "inplace_abn_ii"))
    rows.append(_flag("inplace_scratch", scratch <= 1, scratch, 1, "output-sized forward scratch buffers"))
    return rows


def check_pass_ordering(seed: int) -> dict:
    """II < I <= CP < C in backward passes, on every bench shape."""
    shapes = [shape for shapes in SHAPE_SETS.values() for shape in shapes]
    table = pass_count_table(shapes, seed=seed, scale_batch=1)
    failures = []
    for shape, group in table.groupby("shape", sort=False):
        passes = dict(zip(group["strategy"], group["backward_passes"]))
        ordered = (
            passes["inplace_abn_ii"] < passes["inplace_abn_i"]
            <= passes["checkpointing_proposed"] < passes["checkpointing"]
        )
        if not ordered:
            failures.append(f"{shape}: {passes}")
    detail = "; ".join(failures) if failures else f"{len(shapes)} shapes ordered"
    return _flag("pass_count_ordering", not failures, detail=detail)


ALL_PROPERTIES = (
    "gradient_equivalence",
    "bn_backward_formulas",
    "finite_differences",
    "activation_round_trip",
    "pi_round_trip",
    "sync_stats",
    "fold_into_conv",
    "ledger_unit",
    "ledger_bn_act",
    "ledger_residual",
    "ledger_checkpointing_recompute",
    "inplace_scratch",
    "pass_count_ordering",
)


def run_suite(dtype: str = "double", seed: int = 0, perturb_dagger: float = 0.0) -> list[dict]:
    tc.resolve_dtype(dtype)
    fault = inject_dagger_fault(perturb_dagger) if perturb_dagger else contextlib.nullcontext()
    with fault:
        rows = [
            check_gradient_equivalence(dtype, seed),
            check_bn_formulas(dtype, seed),
            check_finite_differences(seed),
            *check_round_trips(dtype, seed),
            check_sync_stats(dtype, seed),
            check_fold(dtype, seed),
            *check_ledger_counts(seed),
            check_pass_ordering(seed),
        ]
    for row in rows:
        if not row["passed"]:
            logger.warning("property %s failed: max_error %.3e > %.3e (%s)", row["property"], row["max_error"], row["tolerance"], row["detail"])
    return rows
