"""Dense 4-D tensor arithmetic and per-channel reductions.

Tensors are plain numpy arrays in (n, c, h, w) layout, C-contiguous, batch
outermost. Storage is float32 ("single") or float64 ("double"); every
reduction accumulates in float64 regardless of storage.

Each full-tensor pass and each output-sized allocation is reported to the
active PassCounter, if any. The counters are what the strategy comparisons
assert on, so kernels route all of their full-tensor work through here.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ipabn.errors import EmptyInputError, NonFiniteError, ShapeError

DTYPES: dict[str, type[np.floating]] = {"single": np.float32, "double": np.float64}
ACCUMULATOR = np.float64
REDUCE_AXES = (0, 2, 3)


def resolve_dtype(tag: str | np.dtype | type) -> np.dtype:
    if isinstance(tag, str):
        if tag not in DTYPES:
            raise ShapeError(f"unknown dtype tag {tag!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[tag])
    dtype = np.dtype(tag)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported storage dtype {dtype}; use float32 or float64")
    return dtype


def dtype_tag(dtype: np.dtype) -> str:
    return "single" if np.dtype(dtype) == np.float32 else "double"


def machine_eps(dtype: np.dtype | str) -> float:
    return float(np.finfo(resolve_dtype(dtype)).eps)


# -- instrumentation -----------------------------------------------------------


@dataclass
class PassCounter:
    """Tally of full-tensor passes, touched elements and output-sized allocations."""

    passes: int = 0
    elements: int = 0
    allocations: int = 0
    passes_by_section: Counter = field(default_factory=Counter)
    elements_by_section: Counter = field(default_factory=Counter)

    def snapshot(self) -> dict:
        return {
            "passes": self.passes,
            "elements": self.elements,
            "allocations": self.allocations,
            "recompute_passes": self.passes_by_section["recompute"],
            "recompute_elements": self.elements_by_section["recompute"],
        }


_active_counter: ContextVar[PassCounter | None] = ContextVar("ipabn_pass_counter", default=None)
_active_section: ContextVar[str] = ContextVar("ipabn_pass_section", default="compute")


@contextlib.contextmanager
def counting() -> Iterator[PassCounter]:
    counter = PassCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


@contextlib.contextmanager
def section(name: str) -> Iterator[None]:
    """Attribute the passes recorded inside the block to `name`."""
    token = _active_section.set(name)
    try:
        yield
    finally:
        _active_section.reset(token)


def record_pass(t: np.ndarray) -> None:
    counter = _active_counter.get()
    if counter is None:
        return
    name = _active_section.get()
    counter.passes += 1
    counter.elements += t.size
    counter.passes_by_section[name] += 1
    counter.elements_by_section[name] += t.size


def empty_like(t: np.ndarray) -> np.ndarray:
    counter = _active_counter.get()
    if counter is not None:
        counter.allocations += 1
    return np.empty_like(t)


# -- construction and validation -------------------------------------------------


def as_tensor(data, dtype: str | np.dtype | None = None, *, check_finite: bool = True) -> np.ndarray:
    array = np.asarray(data)
    if array.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {array.shape}")
    target = resolve_dtype(dtype) if dtype is not None else (
        array.dtype if array.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    )
    array = np.ascontiguousarray(array, dtype=target)
    if check_finite and not np.all(np.isfinite(array)):
        raise NonFiniteError(f"tensor of shape {array.shape} contains NaN or Inf")
    return array


def channel_count(t: np.ndarray) -> int:
    return t.shape[1]


def elements_per_channel(t: np.ndarray) -> int:
    n, _, h, w = t.shape
    return n * h * w


def _require_same_shape(t: np.ndarray, u: np.ndarray) -> None:
    if t.shape != u.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {u.shape}")


def _require_nonempty(t: np.ndarray) -> None:
    if t.size == 0:
        raise EmptyInputError(f"channel reduction over an empty tensor of shape {t.shape}")


def _broadcast(u, t: np.ndarray):
    """Scalar, same-shape tensor, or length-c per-channel vector, cast to t's dtype."""
    if np.isscalar(u) or np.ndim(u) == 0:
        return t.dtype.type(u)
    u = np.asarray(u)
    if u.ndim == 4:
        _require_same_shape(t, u)
        return u
    if u.ndim == 1:
        if u.shape[0] != t.shape[1]:
            raise ShapeError(f"per-channel vector of length {u.shape[0]} for {t.shape[1]} channels")
        return u.astype(t.dtype, copy=False).reshape(1, -1, 1, 1)
    raise ShapeError(f"cannot broadcast operand of shape {u.shape} against tensor {t.shape}")


def _vector(v, channels: int) -> np.ndarray:
    v = np.asarray(v, dtype=ACCUMULATOR)
    if v.shape != (channels,):
        raise ShapeError(f"per-channel vector of shape {v.shape} for {channels} channels")
    return v


def _target(t: np.ndarray, out: np.ndarray | None) -> np.ndarray:
    if out is None:
        return empty_like(t)
    _require_same_shape(t, out)
    return out


# -- reductions ------------------------------------------------------------------


def channel_sum(t: np.ndarray) -> np.ndarray:
    _require_nonempty(t)
    record_pass(t)
    return np.sum(t, axis=REDUCE_AXES, dtype=ACCUMULATOR)


def channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel sum of a*b, one fused multiply-add pass."""
    _require_same_shape(a, b)
    _require_nonempty(a)
    record_pass(a)
    return np.einsum("nchw,nchw->c", a, b, dtype=ACCUMULATOR, casting="safe")


def channel_mean(t: np.ndarray) -> np.ndarray:
    return channel_sum(t) / elements_per_channel(t)


def channel_var(t: np.ndarray, mean) -> np.ndarray:
    """Biased variance (divisor m) by the two-pass formula."""
    _require_nonempty(t)
    mean = _vector(mean, t.shape[1])
    record_pass(t)
    var = np.empty(t.shape[1], dtype=ACCUMULATOR)
    for k in range(t.shape[1]):
        deviation = t[:, k].astype(ACCUMULATOR) - mean[k]
        var[k] = np.dot(deviation.ravel(), deviation.ravel())
    return var / elements_per_channel(t)


# -- elementwise -----------------------------------------------------------------


def add(t: np.ndarray, u, out: np.ndarray | None = None) -> np.ndarray:
    target = _target(t, out)
    record_pass(t)
    return np.add(t, _broadcast(u, t), out=target)


def sub(t: np.ndarray, u, out: np.ndarray | None = None) -> np.ndarray:
    target = _target(t, out)
    record_pass(t)
    return np.subtract(t, _broadcast(u, t), out=target)


def mul(t: np.ndarray, u, out: np.ndarray | None = None) -> np.ndarray:
    target = _target(t, out)
    record_pass(t)
    return np.multiply(t, _broadcast(u, t), out=target)


def scale(t: np.ndarray, s, out: np.ndarray | None = None) -> np.ndarray:
    return mul(t, s, out=out)


def axpy(alpha, x: np.ndarray, y, out: np.ndarray | None = None) -> np.ndarray:
    """alpha*x + y; alpha scalar or per-channel, y scalar, per-channel or tensor."""
    target = _target(x, out)
    record_pass(x)
    addend = _broadcast(y, x)
    if target is addend:
        addend = addend.copy()
    np.multiply(x, _broadcast(alpha, x), out=target)
    return np.add(target, addend, out=target)


def channel_affine(t: np.ndarray, scale_vec, shift_vec, out: np.ndarray | None = None) -> np.ndarray:
    """t*scale + shift per channel: the fused scale-and-shift."""
    channels = t.shape[1]
    scale_vec = _vector(scale_vec, channels)
    shift_vec = _vector(shift_vec, channels)
    target = _target(t, out)
    record_pass(t)
    np.multiply(t, _broadcast(scale_vec, t), out=target)
    return np.add(target, _broadcast(shift_vec, t), out=target)


def split_batch(t: np.ndarray, parts: int) -> list[np.ndarray]:
    if parts < 1 or parts > t.shape[0]:
        raise ShapeError(f"cannot split a batch of {t.shape[0]} into {parts} nonempty shards")
    return np.array_split(t, parts, axis=0)
