"""Slice 4: buffer ledger and the instrumented strategy comparison."""

import numpy as np
import pytest

from conftest import make_bottleneck_plan, make_unit_plan, random_block
from ipabn.errors import LedgerError
from ipabn.kernels.activation import ActivationFn
from ipabn.kernels.strategies import (
    ALL_STRATEGIES,
    BlockPlan,
    BufferLedger,
    LayerSpec,
    Strategy,
    block_forward,
    compare_strategies,
    ledger_report,
    strategy_profile,
)


def by_strategy(rows):
    return {row["strategy"]: row for row in rows}


class TestBufferLedger:
    def test_shared_tensor_recorded_once(self):
        ledger = BufferLedger()
        shared = np.zeros((2, 2, 2, 2))
        assert ledger.record("a.0", "z", shared, large=True)
        assert not ledger.record("a.1", "x", shared, large=True)
        assert ledger.saved_large_buffers == 1
        assert ledger.large_bytes == shared.nbytes

    def test_duplicate_name_per_layer(self):
        ledger = BufferLedger()
        ledger.record("a.0", "x", np.zeros(3), large=True)
        with pytest.raises(LedgerError, match="a.0"):
            ledger.record("a.0", "x", np.ones(3), large=True)

    def test_reserve_counts_small_bytes(self):
        ledger = BufferLedger()
        ledger.reserve("a.0", "acc", 8, 8)
        assert ledger.small_bytes == 64 and ledger.saved_large_buffers == 0

    def test_chained_bn_act_units_share_buffers(self, rng):
        act = ActivationFn.leaky_relu(0.1)
        plan = BlockPlan((LayerSpec(2, act), LayerSpec(2, act)), Strategy.STANDARD, name="pair")
        params, x, _ = random_block(plan, rng, (2, 2, 2, 2))
        ledger = block_forward(plan, x, params).ledger
        # x0, z0 (= x1), z1
        assert ledger.saved_large_buffers == 3
        assert [e.name for e in ledger.entries if e.large] == ["x", "z", "z"]


class TestLedgerCounts:
    @pytest.mark.parametrize(
        "strategy,expected",
        [
            (Strategy.STANDARD, ["x", "z"]),
            (Strategy.CHECKPOINTING, ["x"]),
            (Strategy.CHECKPOINTING_PROPOSED, ["xhat"]),
            (Strategy.INPLACE_ABN_I, ["z"]),
            (Strategy.INPLACE_ABN_II, ["z"]),
        ],
    )
    def test_unit_large_buffers(self, rng, strategy, expected):
        plan = make_unit_plan(4, 4, 3, strategy=strategy)
        params, x, _ = random_block(plan, rng, (2, 4, 3, 3))
        ledger = block_forward(plan, x, params).ledger
        assert [e.name for e in ledger.entries if e.large] == expected

    def test_mean_kept_only_where_needed(self, rng):
        for strategy in ALL_STRATEGIES:
            plan = make_unit_plan(strategy=strategy)
            params, x, _ = random_block(plan, rng, (2, 3, 3, 3))
            small = [e.name for e in block_forward(plan, x, params).ledger.entries if not e.large]
            assert ("mu_B" in small) == strategy.keeps_mean
            assert "sigma_B" in small and "dgamma_dbeta_acc" in small

    def test_bn_act_conv_bytes(self):
        rows = by_strategy(compare_strategies(make_unit_plan(16, 16, 3), (2, 16, 6, 6)))
        standard, inplace = rows["standard"], rows["inplace_abn_i"]
        assert standard["saved_large_buffers"] == 2
        assert standard["large_bytes"] == 2 * 2 * 16 * 6 * 6 * 8
        assert standard["small_bytes"] == (16 + 16 + 32) * 8
        assert inplace["saved_large_buffers"] == 1
        assert inplace["small_bytes"] == (16 + 32) * 8
        assert inplace["buffer_saving_pct"] == 50.0
        assert inplace["byte_saving_pct"] == 49.32
        assert standard["buffer_saving_pct"] == 0.0

    def test_single_bn_act_layer(self):
        rows = by_strategy(compare_strategies(make_unit_plan(4, kernel=None), (2, 4, 4, 4)))
        assert rows["standard"]["saved_large_buffers"] == 2
        assert rows["inplace_abn_i"]["saved_large_buffers"] == 1

    def test_bottleneck_six_versus_three(self):
        rows = by_strategy(compare_strategies(make_bottleneck_plan(8), (2, 8, 4, 4)))
        assert rows["standard"]["saved_large_buffers"] == 6
        for name in ("inplace_abn_i", "inplace_abn_ii"):
            assert rows[name]["saved_large_buffers"] == 3
            assert rows[name]["buffer_saving_pct"] == 50.0
        assert [layer["large_buffers"] for layer in rows["standard"]["layers"]] == [2, 2, 2]

    def test_report_without_reference(self, rng):
        plan = make_unit_plan()
        params, x, _ = random_block(plan, rng, (2, 3, 3, 3))
        report = ledger_report(block_forward(plan, x, params).ledger)
        assert report["buffer_saving_pct"] == 0.0 and report["byte_saving_pct"] == 0.0
        assert report["total_bytes"] == report["large_bytes"] + report["small_bytes"]
        assert report["layers"][0]["layer"] == "unit.0"


class TestPassCounts:
    def test_backward_pass_counts(self):
        rows = by_strategy(compare_strategies(make_unit_plan(4, 4, 3), (1, 4, 4, 4)))
        passes = {name: row["backward_passes"] for name, row in rows.items()}
        assert passes == {
            "standard": 9,
            "checkpointing": 11,
            "checkpointing_proposed": 10,
            "inplace_abn_i": 10,
            "inplace_abn_ii": 9,
        }

    def test_ordering_and_recompute(self):
        rows = by_strategy(compare_strategies(make_unit_plan(8, 8, 1), (2, 8, 4, 4)))
        p = {name: row["backward_passes"] for name, row in rows.items()}
        assert p["inplace_abn_ii"] < p["inplace_abn_i"] <= p["checkpointing_proposed"] < p["checkpointing"]
        c, cp = rows["checkpointing"], rows["checkpointing_proposed"]
        assert c["saved_large_buffers"] == cp["saved_large_buffers"]
        assert c["recompute_passes"] > cp["recompute_passes"]
        assert c["backward_elements"] >= rows["inplace_abn_i"]["backward_elements"]

    def test_forward_cost_equal_across_strategies(self):
        rows = compare_strategies(make_unit_plan(), (2, 3, 4, 4))
        assert len({row["forward_passes"] for row in rows}) == 1

    def test_inplace_scratch(self):
        rows = by_strategy(compare_strategies(make_unit_plan(), (2, 3, 4, 4)))
        assert rows["inplace_abn_i"]["scratch_allocations"] == 0
        assert rows["inplace_abn_ii"]["scratch_allocations"] == 0
        assert rows["standard"]["scratch_allocations"] == 1

    def test_subset_still_relative_to_standard(self):
        rows = compare_strategies(make_unit_plan(), (2, 3, 4, 4), strategies=[Strategy.INPLACE_ABN_II])
        assert [row["strategy"] for row in rows] == ["inplace_abn_ii"]
        assert rows[0]["buffer_saving_pct"] == 50.0

    def test_profile_reports_gradients(self, rng):
        plan = make_unit_plan(strategy=Strategy.CHECKPOINTING)
        params, x, g = random_block(plan, rng, (2, 3, 3, 3))
        profile = strategy_profile(plan, params, x, g)
        assert profile["dL_dx"].shape == x.shape
        assert profile["backward"]["recompute_passes"] == 3

    @pytest.mark.parametrize("strategy", [Strategy.INPLACE_ABN_I, Strategy.INPLACE_ABN_II])
    def test_profile_output_survives_backward(self, rng, strategy):
        # BN+Act without conv: the block output is the saved z that backward overwrites
        plan = make_unit_plan(kernel=None)
        params, x, g = random_block(plan, rng, (2, 3, 3, 3))
        reference = strategy_profile(plan, params, x.copy(), g)
        profile = strategy_profile(plan.with_strategy(strategy), params, x.copy(), g)
        assert np.allclose(profile["out"], reference["out"], rtol=0, atol=1e-12)
