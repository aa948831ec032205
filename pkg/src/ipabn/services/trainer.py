"""Tiny end-to-end training loop over a residual mini-network.

Topology: 3x3 stem conv -> `depth` bottleneck residual blocks (1x1, 3x3, 1x1
BN+Act+Conv units, identity skip) -> BN+Act head -> global average pool ->
1x1 conv classifier -> softmax cross-entropy. Every block runs under the
configured strategy, so two runs that differ only in strategy must produce
the same loss trajectory.

Parameters are updated in place: the frozen parameter records keep their
identity, their arrays change.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ipabn.errors import ConfigError, DivergenceError
from ipabn.kernels import tensor_core as tc
from ipabn.kernels.activation import ActivationFn
from ipabn.kernels.batchnorm import MinibatchStats, RunningStats, clamp_gamma, update_running
from ipabn.kernels.conv import ConvParams, conv_backward, conv_forward
from ipabn.kernels.strategies import (
    BlockGradients,
    BlockPlan,
    ConvSpec,
    LayerSpec,
    Strategy,
    UnitParams,
    block_inference,
    init_block_params,
    residual_stack_backward,
    residual_stack_forward,
)
from ipabn.services.dataset import DatasetLoader, LabeledImages

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.02
SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4
EPOCH_COLUMNS = ["epoch", "loss", "accuracy", "eval_accuracy"]


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "synthetic"
    epochs: int = 5
    lr: float = DEFAULT_LR
    momentum: float = SGD_MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = 32
    strategy: Strategy = Strategy.STANDARD
    seed: int = 0
    dtype: str = "double"
    width: int = 8
    depth: int = 3
    eval_fraction: float = 0.125

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 for nondegenerate BN statistics, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.width < 2 or self.depth < 1:
            raise ConfigError(f"width must be >= 2 and depth >= 1, got {self.width}, {self.depth}")


@dataclass
class MiniResNet:
    stem: ConvParams
    plans: list[BlockPlan]
    blocks: list[list[UnitParams]]
    fc: ConvParams
    running: list[list[RunningStats]]

    @classmethod
    def build(
        cls,
        strategy: Strategy,
        rng: np.random.Generator,
        *,
        dtype: str = "double",
        in_channels: int = 1,
        width: int = 8,
        depth: int = 3,
        classes: int = 2,
    ) -> "MiniResNet":
        storage = tc.resolve_dtype(dtype)
        act = ActivationFn.leaky_relu()
        inner = max(width // 2, 1)
        plans = [
            BlockPlan(
                (
                    LayerSpec(width, act, ConvSpec(inner, 1)),
                    LayerSpec(inner, act, ConvSpec(inner, 3)),
                    LayerSpec(inner, act, ConvSpec(width, 1)),
                ),
                strategy,
                residual=True,
                name=f"block{b + 1}",
            )
            for b in range(depth)
        ]
        plans.append(BlockPlan((LayerSpec(width, act),), strategy, name="head"))
        stem = ConvParams(
            rng.normal(0.0, np.sqrt(2.0 / (9 * in_channels)), (width, in_channels, 3, 3)).astype(storage),
            np.zeros(width, dtype=storage),
            padding=(1, 1),
        )
        fc = ConvParams(
            rng.normal(0.0, np.sqrt(1.0 / width), (classes, width, 1, 1)).astype(storage),
            np.zeros(classes, dtype=storage),
        )
        blocks = [init_block_params(plan, rng, dtype) for plan in plans]
        running = [[RunningStats.fresh(layer.channels) for layer in plan.layers] for plan in plans]
        return cls(stem, plans, blocks, fc, running)

    def named_parameters(self) -> dict[str, tuple[np.ndarray, bool]]:
        """name -> (array, decays); weight decay applies to conv weights only."""
        named = {
            "stem.weights": (self.stem.weights, True),
            "stem.bias": (self.stem.bias, False),
            "fc.weights": (self.fc.weights, True),
            "fc.bias": (self.fc.bias, False),
        }
        for plan, units in zip(self.plans, self.blocks):
            for i, unit in enumerate(units):
                prefix = plan.layer_id(i)
                if not unit.bn.fixed_gamma:
                    named[f"{prefix}.gamma"] = (unit.bn.gamma, False)
                named[f"{prefix}.beta"] = (unit.bn.beta, False)
                if unit.conv is not None:
                    named[f"{prefix}.weights"] = (unit.conv.weights, True)
                    named[f"{prefix}.bias"] = (unit.conv.bias, False)
        return named

    def logits(self, images: np.ndarray, *, on_stats=None):
        """Training-mode forward. Returns logits and what backward needs."""
        h0 = conv_forward(images, self.stem)
        stack = residual_stack_forward(self.plans, h0, self.blocks, on_stats=on_stats)
        pooled = np.ascontiguousarray(stack.out.mean(axis=(2, 3), keepdims=True), dtype=images.dtype)
        out = conv_forward(pooled, self.fc)
        return out[:, :, 0, 0].astype(np.float64), (images, stack, pooled)

    def backward(self, cache, dL_dlogits: np.ndarray) -> dict[str, np.ndarray]:
        images, stack, pooled = cache
        fc_grads = conv_backward(pooled, self.fc, dL_dlogits[:, :, None, None].astype(pooled.dtype))
        n, c, h, w = stack.out.shape
        dL_dstack = np.ascontiguousarray(
            np.broadcast_to(fc_grads.dL_dz / (h * w), (n, c, h, w)), dtype=stack.out.dtype
        )
        dL_dh0, block_grads = residual_stack_backward(self.plans, stack.saved, dL_dstack, self.blocks)
        stem_grads = conv_backward(images, self.stem, dL_dh0)

        grads = {
            "stem.weights": stem_grads.dL_dweights,
            "stem.bias": stem_grads.dL_dbias,
            "fc.weights": fc_grads.dL_dweights,
            "fc.bias": fc_grads.dL_dbias,
        }
        for plan, bg in zip(self.plans, block_grads):
            grads.update(_block_gradient_names(plan, bg))
        return grads

    def predict(self, images: np.ndarray) -> np.ndarray:
        h = conv_forward(images, self.stem)
        for plan, units, running in zip(self.plans, self.blocks, self.running):
            h = block_inference(plan, h, units, running)
        pooled = np.ascontiguousarray(h.mean(axis=(2, 3), keepdims=True), dtype=images.dtype)
        return np.argmax(conv_forward(pooled, self.fc)[:, :, 0, 0], axis=1)


def _block_gradient_names(plan: BlockPlan, grads: BlockGradients) -> dict[str, np.ndarray]:
    named = {}
    for i, unit in enumerate(grads.units):
        prefix = plan.layer_id(i)
        named[f"{prefix}.gamma"] = unit.dL_dgamma
        named[f"{prefix}.beta"] = unit.dL_dbeta
        if unit.dL_dweights is not None:
            named[f"{prefix}.weights"] = unit.dL_dweights
            named[f"{prefix}.bias"] = unit.dL_dbias
    return named


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    dL_dlogits = np.exp(log_probs)
    dL_dlogits[np.arange(n), labels] -= 1.0
    return loss, dL_dlogits / n


@dataclass
class TrainResult:
    epochs: pd.DataFrame
    step_losses: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"epochs": self.epochs.to_dict("records"), "step_losses": self.step_losses}


class Trainer:
    def __init__(self, loader: DatasetLoader | None = None) -> None:
        self._loader = loader or DatasetLoader()

    def run(self, config: TrainConfig) -> TrainResult:
        data = self._loader.load(config.dataset)
        train, held_out = data.split(config.eval_fraction)
        if len(train) < 2:
            raise ConfigError(f"training split has {len(train)} samples; need at least 2")
        storage = tc.resolve_dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        net = MiniResNet.build(
            config.strategy, rng, dtype=config.dtype, width=config.width, depth=config.depth, classes=data.classes
        )
        velocity: dict[str, np.ndarray] = {}
        step_losses: list[float] = []

        rows = [self._epoch_row(0, net, train, held_out, config, storage, rng=None, velocity=None, step_losses=None)]
        for epoch in range(1, config.epochs + 1):
            rows.append(self._epoch_row(epoch, net, train, held_out, config, storage, rng, velocity, step_losses))
        return TrainResult(pd.DataFrame(rows, columns=EPOCH_COLUMNS), step_losses)

    def _epoch_row(
        self,
        epoch: int,
        net: MiniResNet,
        train: LabeledImages,
        held_out: LabeledImages,
        config: TrainConfig,
        storage: np.dtype,
        rng: np.random.Generator | None,
        velocity: dict[str, np.ndarray] | None,
        step_losses: list[float] | None,
    ) -> dict:
        """Epoch 0 measures the initial model without touching it."""
        training = rng is not None
        order = rng.permutation(len(train)) if training else np.arange(len(train))
        losses, correct, seen = [], 0, 0
        for start in range(0, len(train), config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            images = train.images[idx].astype(storage)
            labels = train.labels[idx]

            def on_stats(b: int, i: int, stats: MinibatchStats) -> None:
                net.running[b][i] = update_running(net.running[b][i], stats)

            logits, cache = net.logits(images, on_stats=on_stats if training else None)
            loss, dL_dlogits = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss became {loss} at epoch {epoch}, step {len(step_losses or [])}; lower the learning rate "
                    f"(currently {config.lr})"
                )
            losses.append(loss * idx.size)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += idx.size
            if training:
                step_losses.append(loss)
                self._sgd_step(net, net.backward(cache, dL_dlogits), velocity, config)

        eval_accuracy = float(np.mean(net.predict(held_out.images.astype(storage)) == held_out.labels)) if len(held_out) else float("nan")
        row = {"epoch": epoch, "loss": sum(losses) / seen, "accuracy": correct / seen, "eval_accuracy": eval_accuracy}
        logger.info("epoch %d: loss %.6f accuracy %.4f eval %.4f", epoch, row["loss"], row["accuracy"], eval_accuracy)
        return row

    @staticmethod
    def _sgd_step(net: MiniResNet, grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray], config: TrainConfig) -> None:
        for name, (param, decays) in net.named_parameters().items():
            g = grads[name].astype(np.float64)
            if decays:
                g = g + config.weight_decay * param
            v = velocity.get(name)
            v = g if v is None else config.momentum * v + g
            velocity[name] = v
            param -= (config.lr * v).astype(param.dtype)
        if config.strategy.requires_gamma_guard:
            for units in net.blocks:
                for unit in units:
                    unit.bn.gamma[...] = clamp_gamma(unit.bn).gamma
