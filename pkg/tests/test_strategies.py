"""Slice 3: the five memory strategies: equal results, different storage."""

import numpy as np
import pytest

from conftest import make_bottleneck_plan, make_unit_plan, random_block
from ipabn.errors import GammaSingularError, NonInvertibleActivationError, PlanError, ShapeError, StrategyMismatchError
from ipabn.kernels import tensor_core as tc
from ipabn.kernels.activation import ActivationFn, act_forward
from ipabn.kernels.batchnorm import ChannelParams, RunningStats, bn_backward_standard, bn_forward, bn_inference
from ipabn.kernels.conv import ConvParams
from ipabn.kernels.gradcheck import check_arrays, check_gradients, fd_gradient
from ipabn.kernels.strategies import (
    ALL_STRATEGIES,
    BlockPlan,
    ConvSpec,
    LayerSpec,
    Strategy,
    UnitParams,
    block_backward,
    block_forward,
    block_inference,
    init_block_params,
    inplace_abn_backward,
    inplace_abn_forward,
    parse_strategy_list,
    residual_stack_backward,
    residual_stack_forward,
    validate_plan,
)


def run(plan, x, params, dL_dout):
    result = block_forward(plan, x, params)
    dL_dx, grads = block_backward(plan, result.saved, dL_dout, params)
    return result, {"dL_dx": dL_dx, **grads.as_dict()}


class TestStrategyNames:
    def test_parse_spellings(self):
        assert Strategy.parse("InPlaceABN_I") is Strategy.INPLACE_ABN_I
        assert Strategy.parse("inplace-abn-ii") is Strategy.INPLACE_ABN_II
        assert Strategy.parse("CheckpointingProposed") is Strategy.CHECKPOINTING_PROPOSED

    def test_unknown_lists_choices(self):
        with pytest.raises(PlanError, match="standard"):
            Strategy.parse("magic")

    def test_strategy_list(self):
        assert parse_strategy_list("all") == ALL_STRATEGIES
        assert parse_strategy_list("standard, inplace_abn_i,standard") == (Strategy.STANDARD, Strategy.INPLACE_ABN_I)
        with pytest.raises(PlanError):
            parse_strategy_list(" , ")

    def test_requirements(self):
        assert not Strategy.CHECKPOINTING.requires_invertible_activation
        assert Strategy.CHECKPOINTING_PROPOSED.requires_invertible_activation
        assert not Strategy.CHECKPOINTING_PROPOSED.requires_gamma_guard
        assert Strategy.INPLACE_ABN_II.requires_gamma_guard
        assert [s for s in Strategy if s.keeps_mean] == [Strategy.STANDARD, Strategy.CHECKPOINTING]


class TestTransparency:
    @pytest.mark.parametrize("strategy", ALL_STRATEGIES)
    def test_bn_act_matches_composition(self, rng, strategy):
        plan = make_unit_plan(3, kernel=None, strategy=strategy)
        params, x, _ = random_block(plan, rng, (2, 3, 4, 4))
        y, _, _ = bn_forward(x, params[0].bn)
        expected = act_forward(plan.layers[0].activation, y)
        assert np.array_equal(block_forward(plan, x, params).out, expected)

    def test_outputs_identical_across_strategies(self, rng):
        plan = make_unit_plan()
        params, x, _ = random_block(plan, rng, (2, 3, 5, 5))
        outs = [block_forward(plan.with_strategy(s), x, params).out for s in ALL_STRATEGIES]
        for out in outs[1:]:
            assert np.array_equal(out, outs[0])

    @pytest.mark.parametrize("strategy", ALL_STRATEGIES[1:])
    def test_gradients_match_standard(self, rng, strategy):
        plan = make_unit_plan(3, 4, 3)
        params, x, dL_dout = random_block(plan, rng, (3, 3, 5, 5))
        _, reference = run(plan, x, params, dL_dout)
        _, other = run(plan.with_strategy(strategy), x, params, dL_dout)
        report = check_gradients(reference, other, 1e-9)
        assert report.passed, report

    @pytest.mark.parametrize("strategy", ALL_STRATEGIES)
    def test_zero_upstream_gradient(self, rng, strategy):
        plan = make_unit_plan(strategy=strategy)
        params, x, dL_dout = random_block(plan, rng, (2, 3, 4, 4))
        _, grads = run(plan, x, params, np.zeros_like(dL_dout))
        for name, g in grads.items():
            assert np.allclose(g, 0.0, atol=1e-14), name

    def test_block_gradient_against_finite_differences(self, rng):
        plan = make_unit_plan(2, 2, 3, slope=0.1)
        while True:
            params, x, w = random_block(plan, rng, (2, 2, 3, 3))
            y, _, _ = bn_forward(x, params[0].bn)
            if np.min(np.abs(y)) > 1e-3:  # off the kink
                break
        _, grads = run(plan.with_strategy(Strategy.INPLACE_ABN_II), x, params, w)
        numeric = fd_gradient(lambda t: float(np.sum(block_forward(plan, t, params).out * w)), x)
        assert check_arrays(grads["dL_dx"], numeric, 1e-5).passed

    def test_single_precision_close(self, rng):
        plan = make_unit_plan()
        params, x, dL_dout = random_block(plan, rng, (2, 3, 4, 4), dtype="single")
        _, reference = run(plan, x, params, dL_dout)
        for strategy in ALL_STRATEGIES[1:]:
            _, other = run(plan.with_strategy(strategy), x, params, dL_dout)
            assert check_gradients(reference, other, 1e-3).passed
            assert other["dL_dx"].dtype == np.float32


class TestInPlaceLayer:
    def test_forward_overwrites_input(self, rng):
        x = rng.standard_normal((2, 3, 3, 3))
        p = ChannelParams(rng.uniform(0.5, 2, 3), rng.uniform(-1, 1, 3))
        f = ActivationFn.leaky_relu(0.1)
        y, _, _ = bn_forward(x, p)
        expected = act_forward(f, y)
        z, stats = inplace_abn_forward(x, p, f, overwrite_input=True)
        assert z is x
        assert np.array_equal(z, expected)
        assert stats.mu is not None

    def test_forward_allocates_one_buffer(self, rng):
        x = rng.standard_normal((2, 3, 3, 3))
        with tc.counting() as counter:
            inplace_abn_forward(x, ChannelParams.identity(3), ActivationFn.leaky_relu(0.1))
        assert counter.allocations == 1

    @pytest.mark.parametrize("variant", [Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II])
    def test_backward_recovers_over_z(self, rng, variant):
        x = rng.standard_normal((2, 2, 3, 3))
        g = rng.standard_normal(x.shape)
        p = ChannelParams(np.array([1.5, -0.7]), np.array([0.2, -0.4]))
        f = ActivationFn.leaky_relu(0.2)
        y, _, stats = bn_forward(x, p)
        z = act_forward(f, y)
        reference = bn_backward_standard(x, np.where(y >= 0, g, 0.2 * g), stats, p)

        grads = inplace_abn_backward(z, g.copy(), stats.without_mean(), p, f, variant)
        assert check_arrays(grads.dL_dx, reference.dL_dx, 1e-10).passed
        assert check_arrays(grads.dL_dgamma, reference.dL_dgamma, 1e-10).passed
        # z now holds y (variant II) or xhat (variant I), not the activation output
        assert not np.array_equal(z, act_forward(f, y))

    def test_backward_needs_inplace_variant(self, rng):
        z = rng.standard_normal((1, 1, 2, 2))
        with pytest.raises(StrategyMismatchError):
            inplace_abn_backward(z, z, None, ChannelParams.identity(1), ActivationFn(), Strategy.STANDARD)

    def test_relu_rejected(self, rng):
        with pytest.raises(NonInvertibleActivationError):
            inplace_abn_forward(rng.standard_normal((1, 1, 2, 2)), ChannelParams.identity(1), ActivationFn.relu())


class TestSavedState:
    def test_second_backward_rejected(self, rng):
        plan = make_unit_plan(strategy=Strategy.INPLACE_ABN_I)
        params, x, dL_dout = random_block(plan, rng, (2, 3, 4, 4))
        result = block_forward(plan, x, params)
        block_backward(plan, result.saved, dL_dout, params)
        with pytest.raises(StrategyMismatchError, match="consumed"):
            block_backward(plan, result.saved, dL_dout, params)

    def test_mismatched_strategy_rejected(self, rng):
        plan = make_unit_plan()
        params, x, dL_dout = random_block(plan, rng, (2, 3, 4, 4))
        result = block_forward(plan, x, params)
        with pytest.raises(StrategyMismatchError, match="checkpointing"):
            block_backward(plan.with_strategy(Strategy.CHECKPOINTING), result.saved, dL_dout, params)

    def test_inplace_keeps_sigma_only(self, rng):
        plan = make_unit_plan(strategy=Strategy.INPLACE_ABN_II)
        params, x, _ = random_block(plan, rng, (2, 3, 4, 4))
        seen = []
        result = block_forward(plan, x, params, on_stats=lambda i, s: seen.append(s))
        assert result.saved.units[0].stats.mu is None
        assert seen[0].mu is not None


class TestValidation:
    def test_relu_rejected_for_inplace(self):
        plan = BlockPlan((LayerSpec(2, ActivationFn.relu()),), Strategy.INPLACE_ABN_I, name="b")
        with pytest.raises(PlanError, match="b.0.*invertible"):
            validate_plan(plan)

    def test_relu_allowed_for_standard_and_checkpointing(self, rng):
        for strategy in (Strategy.STANDARD, Strategy.CHECKPOINTING):
            plan = BlockPlan((LayerSpec(2, ActivationFn.relu(), ConvSpec(2, 1)),), strategy)
            params, x, g = random_block(plan, rng, (2, 2, 3, 3))
            _, grads = run(plan, x, params, g)
            assert grads["dL_dx"].shape == x.shape

    def test_channel_chaining(self):
        plan = BlockPlan((LayerSpec(2, conv=ConvSpec(3, 1)), LayerSpec(4)))
        with pytest.raises(PlanError, match="produces 3 channels"):
            validate_plan(plan)

    def test_residual_needs_equal_channels(self):
        with pytest.raises(PlanError, match="identity skip"):
            validate_plan(BlockPlan((LayerSpec(2, conv=ConvSpec(3, 1)),), residual=True))

    def test_gamma_guard(self, rng):
        plan = make_unit_plan(strategy=Strategy.INPLACE_ABN_II)
        params = init_block_params(plan, rng)
        params[0].bn.gamma[1] = 0.0
        with pytest.raises(GammaSingularError) as info:
            validate_plan(plan, params)
        assert info.value.channel == 1
        validate_plan(plan.with_strategy(Strategy.CHECKPOINTING_PROPOSED), params)

    def test_params_shape_checked(self, rng):
        plan = make_unit_plan()
        params = init_block_params(make_unit_plan(3, 5, 3), rng)
        with pytest.raises(PlanError, match="conv weights"):
            validate_plan(plan, params)
        with pytest.raises(PlanError, match="parameter sets"):
            validate_plan(plan, params * 2)

    def test_fixed_gamma_init(self, rng):
        plan = BlockPlan((LayerSpec(3, fixed_gamma=True),))
        params = init_block_params(plan, rng, random_affine=True)
        assert np.array_equal(params[0].bn.gamma, np.ones(3))
        assert params[0].bn.fixed_gamma


class TestResidual:
    @pytest.mark.parametrize("strategy", ALL_STRATEGIES[1:])
    def test_bottleneck_matches_standard(self, rng, strategy):
        plan = make_bottleneck_plan(8)
        params, x, dL_dout = random_block(plan, rng, (2, 8, 4, 4))
        standard, reference = run(plan, x, params, dL_dout)
        result, other = run(plan.with_strategy(strategy), x, params, dL_dout)
        assert np.array_equal(result.out, standard.out)
        assert check_gradients(reference, other, 1e-9).passed

    def test_zero_conv_weights_pass_input_through(self, rng):
        plan = make_bottleneck_plan(4)
        params = init_block_params(plan, rng)
        params = [
            UnitParams(u.bn, ConvParams(np.zeros_like(u.conv.weights), np.zeros_like(u.conv.bias), u.conv.stride, u.conv.padding))
            for u in params
        ]
        x = rng.standard_normal((2, 4, 3, 3))
        g = rng.standard_normal(x.shape)
        result = block_forward(plan, x, params)
        assert np.array_equal(result.out, x)
        dL_dx, _ = block_backward(plan, result.saved, g, params)
        assert np.allclose(dL_dx, g)

    def test_stack_round_trip(self, rng):
        plans = [make_bottleneck_plan(4, Strategy.INPLACE_ABN_I, name=f"b{i}") for i in range(2)]
        params = [init_block_params(p, rng, random_affine=True) for p in plans]
        x = rng.standard_normal((2, 4, 3, 3))
        g = rng.standard_normal(x.shape)
        stats = []
        stack = residual_stack_forward(plans, x, params, on_stats=lambda b, i, s: stats.append((b, i)))
        assert stats == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
        dL_dx, grads = residual_stack_backward(plans, stack.saved, g, params)
        assert dL_dx.shape == x.shape and len(grads) == 2

        standard = [p.with_strategy(Strategy.STANDARD) for p in plans]
        ref = residual_stack_forward(standard, x, params)
        ref_dx, _ = residual_stack_backward(standard, ref.saved, g, params)
        assert np.array_equal(stack.out, ref.out)
        assert check_arrays(dL_dx, ref_dx, 1e-9).passed

    def test_stack_names_distinct(self, rng):
        plan = make_bottleneck_plan(4)
        params = init_block_params(plan, rng)
        with pytest.raises(PlanError, match="distinct"):
            residual_stack_forward([plan, plan], np.zeros((1, 4, 2, 2)), [params, params])


class TestInference:
    def test_matches_bn_inference_composition(self, rng):
        plan = make_unit_plan(2, kernel=None)
        params = init_block_params(plan, rng, random_affine=True)
        running = [RunningStats(rng.normal(0, 1, 2), rng.uniform(0.5, 2, 2))]
        x = rng.standard_normal((2, 2, 3, 3))
        expected = act_forward(plan.layers[0].activation, bn_inference(x, params[0].bn, running[0]))
        assert np.array_equal(block_inference(plan, x, params, running), expected)

    def test_running_stats_count(self, rng):
        plan = make_unit_plan(2, kernel=None)
        params = init_block_params(plan, rng)
        with pytest.raises(ValueError):
            block_inference(plan, np.zeros((1, 2, 2, 2)), params, [])

    def test_residual_shape_error(self, rng):
        plan = BlockPlan((LayerSpec(2, conv=ConvSpec(2, 3, stride=2)),), residual=True)
        params = init_block_params(plan, rng)
        with pytest.raises(ShapeError):
            block_forward(plan, rng.standard_normal((1, 2, 4, 4)), params)
