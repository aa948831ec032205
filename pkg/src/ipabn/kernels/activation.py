"""Invertible activations: Leaky ReLU family and identity.

Branch convention everywhere: y >= 0 (and z >= 0) takes the unit-slope
branch, so the derivative at exactly 0 is 1. Because a > 0, sign(z) equals
sign(y) and the backward pass can be evaluated from either side.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from ipabn.errors import NonInvertibleActivationError, ShapeError
from ipabn.kernels import tensor_core as tc

DEFAULT_SLOPE = 0.01
INVERTIBLE_SLOPE_FLOOR = 1e-12


class ActivationKind(StrEnum):
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ActivationFn:
    kind: ActivationKind = ActivationKind.LEAKY_RELU
    slope: float = DEFAULT_SLOPE

    def __post_init__(self) -> None:
        if self.kind is ActivationKind.IDENTITY:
            object.__setattr__(self, "slope", 1.0)
        elif not 0.0 <= self.slope <= 1.0:
            raise ShapeError(f"leaky_relu slope must lie in [0, 1], got {self.slope}")

    @classmethod
    def leaky_relu(cls, slope: float = DEFAULT_SLOPE) -> "ActivationFn":
        return cls(ActivationKind.LEAKY_RELU, slope)

    @classmethod
    def relu(cls) -> "ActivationFn":
        return cls(ActivationKind.LEAKY_RELU, 0.0)

    @classmethod
    def identity(cls) -> "ActivationFn":
        return cls(ActivationKind.IDENTITY, 1.0)

    @property
    def invertible(self) -> bool:
        return self.slope >= INVERTIBLE_SLOPE_FLOOR

    def describe(self) -> str:
        if self.kind is ActivationKind.IDENTITY:
            return "identity"
        return "relu" if self.slope == 0.0 else f"leaky_relu({self.slope:g})"


def _negative_scale(f: ActivationFn, t: np.ndarray, factor: float, out: np.ndarray | None) -> np.ndarray:
    target = t if out is t else tc.empty_like(t) if out is None else out
    if target is not t:
        if target.shape != t.shape:
            raise ShapeError(f"output buffer {target.shape} does not match input {t.shape}")
        np.copyto(target, t)
    tc.record_pass(t)
    if f.kind is ActivationKind.LEAKY_RELU and factor != 1.0:
        np.multiply(target, target.dtype.type(factor), out=target, where=t < 0)
    return target


def act_forward(f: ActivationFn, y: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """z = y for y >= 0, a*y for y < 0. Pass out=y to compute in place."""
    return _negative_scale(f, y, f.slope, out)


def act_inverse(f: ActivationFn, z: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """y = z for z >= 0, z/a for z < 0."""
    if not f.invertible:
        raise NonInvertibleActivationError(
            f"{f.describe()} has slope {f.slope:g} < {INVERTIBLE_SLOPE_FLOOR:g} and cannot be inverted"
        )
    target = z if out is z else tc.empty_like(z) if out is None else out
    if target is not z:
        if target.shape != z.shape:
            raise ShapeError(f"output buffer {target.shape} does not match input {z.shape}")
        np.copyto(target, z)
    tc.record_pass(z)
    if f.kind is ActivationKind.LEAKY_RELU and f.slope != 1.0:
        negative = z < 0
        np.divide(target, target.dtype.type(f.slope), out=target, where=negative)
    return target


def act_backward_from_output(
    f: ActivationFn, z: np.ndarray, dL_dz: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """dL/dy from the stored output z."""
    if z.shape != dL_dz.shape:
        raise ShapeError(f"activation output {z.shape} vs gradient {dL_dz.shape}")
    target = dL_dz if out is dL_dz else tc.empty_like(dL_dz) if out is None else out
    if target is not dL_dz:
        np.copyto(target, dL_dz)
    tc.record_pass(z)
    if f.kind is ActivationKind.LEAKY_RELU and f.slope != 1.0:
        np.multiply(target, target.dtype.type(f.slope), out=target, where=z < 0)
    return target


def act_backward(f: ActivationFn, y: np.ndarray, dL_dz: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """dL/dy evaluated from the input y; identical to the output-side form."""
    return act_backward_from_output(f, y, dL_dz, out=out)
