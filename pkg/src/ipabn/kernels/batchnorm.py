"""Batch normalization: forward, the three backward formulations, pi and its
inverse, running statistics, shard merging and inference-time folding.

Notation follows the usual BN write-up: x input, xhat whitened, y = gamma*xhat
+ beta, m elements per channel. Variance is always biased (divisor m).

Backward formulations, all returning BNGradients:
  standard  -- from x; recomputes xhat, needs mu and sigma
  star      -- from xhat; needs sigma only
  dagger    -- from y; needs sigma only, absorbs pi^-1 into O(1) per-channel terms
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from ipabn.errors import GammaSingularError, ShapeError, StatsError
from ipabn.kernels import tensor_core as tc

DEFAULT_EPS = 1e-5
GAMMA_GUARD = 1e-8
GAMMA_CLAMP = 1e-3
DEFAULT_MOMENTUM = 0.1


@dataclass(frozen=True)
class ChannelParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS
    fixed_gamma: bool = False

    def __post_init__(self) -> None:
        gamma = np.asarray(self.gamma, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if gamma.ndim != 1 or gamma.shape != beta.shape:
            raise ShapeError(f"gamma {gamma.shape} and beta {beta.shape} must be equal-length vectors")
        if not self.eps > 0:
            raise StatsError(f"eps must be > 0, got {self.eps}")
        if self.fixed_gamma and not np.all(gamma == 1.0):
            raise StatsError("fixed_gamma layers must carry gamma == 1")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_EPS, fixed_gamma: bool = False) -> "ChannelParams":
        return cls(np.ones(channels), np.zeros(channels), eps, fixed_gamma)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def require_invertible(self, guard: float = GAMMA_GUARD) -> None:
        small = np.flatnonzero(np.abs(self.gamma) < guard)
        if small.size:
            k = int(small[0])
            raise GammaSingularError(k, float(self.gamma[k]), guard)


@dataclass(frozen=True)
class MinibatchStats:
    """Per-channel whitening statistics. mu is None on records that kept sigma only."""

    mu: np.ndarray | None
    var: np.ndarray
    m: int

    def __post_init__(self) -> None:
        var = np.asarray(self.var, dtype=np.float64)
        if np.any(var < 0):
            raise StatsError(f"negative variance in channel {int(np.argmax(var < 0))}")
        if self.m < 1:
            raise StatsError(f"element count m must be >= 1, got {self.m}")
        object.__setattr__(self, "var", var)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=np.float64)
            if mu.shape != var.shape:
                raise ShapeError(f"mu {mu.shape} and var {var.shape} differ")
            object.__setattr__(self, "mu", mu)

    @property
    def channels(self) -> int:
        return self.var.shape[0]

    def inv_std(self, eps: float) -> np.ndarray:
        return 1.0 / np.sqrt(self.var + eps)

    def without_mean(self) -> "MinibatchStats":
        return replace(self, mu=None)

    def require_mean(self) -> np.ndarray:
        if self.mu is None:
            raise StatsError("this statistics record kept sigma only; mu_B is required here")
        return self.mu


@dataclass(frozen=True)
class RunningStats:
    mu_run: np.ndarray
    var_run: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum <= 1.0:
            raise StatsError(f"running-stats momentum must lie in (0, 1], got {self.momentum}")
        mu_run = np.asarray(self.mu_run, dtype=np.float64)
        var_run = np.asarray(self.var_run, dtype=np.float64)
        if mu_run.shape != var_run.shape:
            raise ShapeError(f"mu_run {mu_run.shape} and var_run {var_run.shape} differ")
        if np.any(var_run < 0):
            raise StatsError("running variance must be >= 0")
        object.__setattr__(self, "mu_run", mu_run)
        object.__setattr__(self, "var_run", var_run)

    @classmethod
    def fresh(cls, channels: int, momentum: float = DEFAULT_MOMENTUM) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)


@dataclass(frozen=True)
class BNGradients:
    dL_dx: np.ndarray
    dL_dgamma: np.ndarray
    dL_dbeta: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"dL_dx": self.dL_dx, "dL_dgamma": self.dL_dgamma, "dL_dbeta": self.dL_dbeta}


def _require_channels(t: np.ndarray, channels: int) -> None:
    if t.shape[1] != channels:
        raise ShapeError(f"tensor has {t.shape[1]} channels, parameters have {channels}")


# -- forward -------------------------------------------------------------------


def batch_stats(x: np.ndarray) -> MinibatchStats:
    mu = tc.channel_mean(x)
    return MinibatchStats(mu, tc.channel_var(x, mu), tc.elements_per_channel(x))


def bn_forward(x: np.ndarray, p: ChannelParams) -> tuple[np.ndarray, np.ndarray, MinibatchStats]:
    _require_channels(x, p.channels)
    stats = batch_stats(x)
    inv_std = stats.inv_std(p.eps)
    xhat = tc.channel_affine(x, inv_std, -stats.mu * inv_std)
    y = tc.channel_affine(xhat, p.gamma, p.beta)
    return y, xhat, stats


def bn_forward_into(x: np.ndarray, p: ChannelParams, out: np.ndarray) -> tuple[np.ndarray, MinibatchStats]:
    """Whitening then pi, both written into `out` (which may be x itself).

    Same arithmetic as bn_forward, so y is bitwise identical to its y.
    """
    _require_channels(x, p.channels)
    stats = batch_stats(x)
    inv_std = stats.inv_std(p.eps)
    tc.channel_affine(x, inv_std, -stats.mu * inv_std, out=out)
    tc.channel_affine(out, p.gamma, p.beta, out=out)
    return out, stats


def fused_scale_shift(stats: MinibatchStats, p: ChannelParams) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of y = x*scale + shift, folding whitening and pi together."""
    inv_std = stats.inv_std(p.eps)
    scale = p.gamma * inv_std
    shift = p.beta - p.gamma * stats.require_mean() * inv_std
    return scale, shift


def bn_inference(x: np.ndarray, p: ChannelParams, r: RunningStats) -> np.ndarray:
    _require_channels(x, p.channels)
    inv_std = 1.0 / np.sqrt(r.var_run + p.eps)
    return tc.channel_affine(x, p.gamma * inv_std, p.beta - p.gamma * r.mu_run * inv_std)


def pi_forward(xhat: np.ndarray, p: ChannelParams, out: np.ndarray | None = None) -> np.ndarray:
    _require_channels(xhat, p.channels)
    return tc.channel_affine(xhat, p.gamma, p.beta, out=out)


def pi_inverse(y: np.ndarray, p: ChannelParams, out: np.ndarray | None = None) -> np.ndarray:
    """xhat = (y - beta) / gamma; pass out=y to recover xhat in place."""
    _require_channels(y, p.channels)
    p.require_invertible()
    return tc.channel_affine(y, 1.0 / p.gamma, -p.beta / p.gamma, out=out)


# -- backward ------------------------------------------------------------------

_dagger_fault: ContextVar[float] = ContextVar("ipabn_dagger_fault", default=0.0)


@contextlib.contextmanager
def inject_dagger_fault(scale: float) -> Iterator[None]:
    """Scale BN-dagger's dL/dx by (1 + scale) inside the block. Test-of-tests hook."""
    token = _dagger_fault.set(scale)
    try:
        yield
    finally:
        _dagger_fault.reset(token)


def _check_backward_shapes(t: np.ndarray, dL_dy: np.ndarray, stats: MinibatchStats, p: ChannelParams) -> None:
    if t.shape != dL_dy.shape:
        raise ShapeError(f"saved tensor {t.shape} vs incoming gradient {dL_dy.shape}")
    _require_channels(t, p.channels)
    if stats.channels != p.channels:
        raise ShapeError(f"statistics for {stats.channels} channels, parameters for {p.channels}")
    if stats.m != tc.elements_per_channel(t):
        raise ShapeError(f"statistics count m={stats.m} but tensor has {tc.elements_per_channel(t)} per channel")


def bn_backward_star(
    xhat: np.ndarray,
    dL_dy: np.ndarray,
    stats: MinibatchStats,
    p: ChannelParams,
    out: np.ndarray | None = None,
) -> BNGradients:
    _check_backward_shapes(xhat, dL_dy, stats, p)
    m = stats.m
    dL_dbeta = tc.channel_sum(dL_dy)
    dL_dgamma = tc.channel_dot(dL_dy, xhat)
    k = p.gamma * stats.inv_std(p.eps)
    dL_dx = tc.axpy(-dL_dgamma / m, xhat, dL_dy, out=out)
    tc.channel_affine(dL_dx, k, -k * dL_dbeta / m, out=dL_dx)
    return BNGradients(dL_dx, dL_dgamma, dL_dbeta)


def bn_backward_dagger(
    y: np.ndarray,
    dL_dy: np.ndarray,
    stats: MinibatchStats,
    p: ChannelParams,
    out: np.ndarray | None = None,
) -> BNGradients:
    _check_backward_shapes(y, dL_dy, stats, p)
    p.require_invertible()
    m = stats.m
    gamma, beta = p.gamma, p.beta
    dL_dbeta = tc.channel_sum(dL_dy)
    dL_dgamma = (tc.channel_dot(dL_dy, y) - beta * dL_dbeta) / gamma
    k = gamma * stats.inv_std(p.eps)
    fault = _dagger_fault.get()
    if fault:
        k = k * (1.0 + fault)
    dL_dx = tc.axpy(-dL_dgamma / (gamma * m), y, dL_dy, out=out)
    tc.channel_affine(dL_dx, k, -k * (dL_dbeta - beta / gamma * dL_dgamma) / m, out=dL_dx)
    return BNGradients(dL_dx, dL_dgamma, dL_dbeta)


def bn_backward_standard(
    x: np.ndarray,
    dL_dy: np.ndarray,
    stats: MinibatchStats,
    p: ChannelParams,
    out: np.ndarray | None = None,
) -> BNGradients:
    _check_backward_shapes(x, dL_dy, stats, p)
    mu = stats.require_mean()
    inv_std = stats.inv_std(p.eps)
    with tc.section("recompute"):
        xhat = tc.channel_affine(x, inv_std, -mu * inv_std)
    return bn_backward_star(xhat, dL_dy, stats, p, out=out)


# -- statistics bookkeeping ------------------------------------------------------


def update_running(r: RunningStats, s: MinibatchStats) -> RunningStats:
    if r.mu_run.shape[0] != s.channels:
        raise ShapeError(f"running stats for {r.mu_run.shape[0]} channels, batch stats for {s.channels}")
    mom = r.momentum
    return RunningStats(
        (1.0 - mom) * r.mu_run + mom * s.require_mean(),
        (1.0 - mom) * r.var_run + mom * s.var,
        mom,
    )


def sync_stats(shards: Sequence[MinibatchStats]) -> MinibatchStats:
    """Merge per-shard statistics into those of the concatenated batch."""
    if not shards:
        raise StatsError("sync_stats needs at least one shard")
    if len(shards) == 1:
        return shards[0]
    channels = shards[0].channels
    if any(s.channels != channels for s in shards):
        raise ShapeError(f"shards disagree on channel count: {[s.channels for s in shards]}")
    m = sum(s.m for s in shards)
    weights = np.array([s.m for s in shards], dtype=np.float64)[:, None]
    mus = np.stack([s.require_mean() for s in shards])
    variances = np.stack([s.var for s in shards])
    mu = np.sum(weights * mus, axis=0) / m
    # centred form of sum m_k (var_k + mu_k^2) / m - mu^2
    var = np.sum(weights * (variances + (mus - mu) ** 2), axis=0) / m
    return MinibatchStats(mu, np.maximum(var, 0.0), m)


def shard_stats(x: np.ndarray, parts: int) -> list[MinibatchStats]:
    return [batch_stats(shard) for shard in tc.split_batch(x, parts)]


def sync_bn_forward(shards: Sequence[np.ndarray], p: ChannelParams) -> tuple[list[np.ndarray], MinibatchStats]:
    """Normalize every shard with the merged statistics of all shards."""
    merged = sync_stats([batch_stats(s) for s in shards])
    inv_std = merged.inv_std(p.eps)
    outputs = []
    for shard in shards:
        _require_channels(shard, p.channels)
        xhat = tc.channel_affine(shard, inv_std, -merged.mu * inv_std)
        outputs.append(tc.channel_affine(xhat, p.gamma, p.beta, out=xhat))
    return outputs, merged


def clamp_gamma(p: ChannelParams, tol: float = GAMMA_CLAMP) -> ChannelParams:
    """Push |gamma| up to tol, keeping its sign (0 goes positive)."""
    sign = np.where(p.gamma < 0, -1.0, 1.0)
    return replace(p, gamma=sign * np.maximum(np.abs(p.gamma), tol))


def fold_into_conv(
    conv_weights: np.ndarray,
    conv_bias: np.ndarray,
    r: RunningStats,
    p: ChannelParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Absorb inference-mode BN over a conv's output channels into the conv."""
    out_channels = conv_weights.shape[0]
    if not (conv_bias.shape[0] == out_channels == p.channels == r.mu_run.shape[0]):
        raise ShapeError(
            f"conv has {out_channels} output channels (bias {conv_bias.shape[0]}), "
            f"BN has {p.channels}, running stats {r.mu_run.shape[0]}"
        )
    s = p.gamma / np.sqrt(r.var_run + p.eps)
    weights = conv_weights * s.reshape(-1, *([1] * (conv_weights.ndim - 1)))
    bias = s * (conv_bias - r.mu_run) + p.beta
    return weights.astype(conv_weights.dtype, copy=False), bias.astype(conv_bias.dtype, copy=False)
