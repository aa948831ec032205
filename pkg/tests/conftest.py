import numpy as np
import pytest

from ipabn import deps
from ipabn.kernels.activation import ActivationFn
from ipabn.kernels.strategies import BlockPlan, ConvSpec, LayerSpec, Strategy, block_output_shape, init_block_params
from ipabn.services.bench_runner import BenchRunner
from ipabn.services.dataset import DatasetLoader


class FakeClock:
    """Nanosecond clock that advances by `step` on every reading."""

    def __init__(self, step: int = 1000):
        self.now = 0
        self.step = step
        self.readings = 0

    def __call__(self) -> int:
        self.now += self.step
        self.readings += 1
        return self.now


def make_unit_plan(
    channels: int = 3,
    out_channels: int = 4,
    kernel: int | None = 3,
    slope: float = 0.1,
    strategy: Strategy = Strategy.STANDARD,
) -> BlockPlan:
    """One BN+Act(+Conv) unit; kernel=None drops the conv."""
    conv = ConvSpec(out_channels, kernel) if kernel is not None else None
    return BlockPlan((LayerSpec(channels, ActivationFn.leaky_relu(slope), conv),), strategy, name="unit")


def make_bottleneck_plan(channels: int = 8, strategy: Strategy = Strategy.STANDARD, name: str = "res") -> BlockPlan:
    act = ActivationFn.leaky_relu(0.1)
    inner = channels // 2
    return BlockPlan(
        (
            LayerSpec(channels, act, ConvSpec(inner, 1)),
            LayerSpec(inner, act, ConvSpec(inner, 3)),
            LayerSpec(inner, act, ConvSpec(channels, 1)),
        ),
        strategy,
        residual=True,
        name=name,
    )


def random_block(plan: BlockPlan, rng: np.random.Generator, shape: tuple, dtype: str = "double"):
    """Random affine parameters, input and upstream gradient for `plan`."""
    storage = np.float64 if dtype == "double" else np.float32
    params = init_block_params(plan, rng, dtype, random_affine=True)
    x = rng.standard_normal(shape).astype(storage)
    dL_dout = rng.standard_normal(block_output_shape(params, shape, plan.residual)).astype(storage)
    return params, x, dL_dout


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fake_clock():
    clock = FakeClock()
    deps.set_bench_runner(BenchRunner(clock=clock))
    yield clock
    deps.set_bench_runner(None)


@pytest.fixture
def dataset_loader(tmp_path):
    loader = DatasetLoader(cache_dir=tmp_path / "cache")
    deps.set_dataset_loader(loader)
    yield loader
    deps.set_dataset_loader(None)
