"""Finite-difference oracle and gradient comparison.

Relative error is normwise per array: max|a - b| / max(||a||_inf, ||b||_inf, floor).
A gradient that is exactly zero on both sides (sum of xhat cancels, dL_dout = 0)
therefore compares as error 0 instead of 0/0.

check_gradients also floors every array at SET_FLOOR times the largest entry
of the whole gradient set. Gradients that vanish in exact arithmetic (the conv
bias in front of a BN) are rounding noise and are measured against that scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ipabn.errors import NonFiniteError, ShapeError
from ipabn.kernels.batchnorm import BNGradients

DEFAULT_STEP = 1e-5
ERROR_FLOOR = 1e-12
SET_FLOOR = 1e-2


@dataclass(frozen=True)
class CheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    passed: bool
    tolerance: float

    def to_row(self) -> dict:
        return {
            "property": self.name,
            "passed": self.passed,
            "max_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "detail": f"worst at {self.worst_index}, abs {self.max_abs_error:.3e}",
        }


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of a scalar function, one element at a time.

    f receives a perturbed float64 copy of x, whatever the dtype of x, and must
    recompute everything that depends on x (batch statistics included).
    """
    if not step > 0:
        raise ShapeError(f"finite-difference step must be > 0, got {step}")
    shifted = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(shifted)
    flat_shifted = shifted.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_shifted.size):
        original = flat_shifted[i]
        flat_shifted[i] = original + step
        upper = float(f(shifted.copy()))
        flat_shifted[i] = original - step
        lower = float(f(shifted.copy()))
        flat_shifted[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            index = np.unravel_index(i, shifted.shape)
            raise NonFiniteError(f"function value is not finite when perturbing element {index}")
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = ERROR_FLOOR) -> tuple[float, float, tuple]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare arrays of shape {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0, 0.0, ()
    diff = np.abs(a - b)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    max_abs = float(diff[worst])
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return max_abs / scale, max_abs, tuple(int(i) for i in worst)


def check_arrays(a: np.ndarray, b: np.ndarray, tol: float, name: str = "arrays", floor: float = ERROR_FLOOR) -> CheckReport:
    rel, max_abs, worst = relative_error(a, b, floor)
    return CheckReport(name, rel, max_abs, worst, rel <= tol, tol)


def check_gradients(
    a: Mapping[str, np.ndarray],
    b: Mapping[str, np.ndarray],
    tol: float,
    name: str = "gradients",
    floor: float = ERROR_FLOOR,
    set_floor: float = SET_FLOOR,
) -> CheckReport:
    """Worst per-array comparison over two gradient mappings with the same keys."""
    if set(a) != set(b):
        raise ShapeError(f"gradient sets differ: {sorted(set(a) ^ set(b))}")
    scale = max((float(np.max(np.abs(arr))) for arr in (*a.values(), *b.values()) if np.size(arr)), default=0.0)
    floor = max(floor, set_floor * scale)
    worst = CheckReport(name, 0.0, 0.0, (), True, tol)
    for key in sorted(a):
        rel, max_abs, index = relative_error(a[key], b[key], floor)
        if rel > worst.max_rel_error or (rel == worst.max_rel_error and max_abs > worst.max_abs_error):
            worst = CheckReport(name, rel, max_abs, (key, *index), rel <= tol, tol)
    return worst


def check_equivalence(a: BNGradients, b: BNGradients, tol: float, name: str = "bn_gradients") -> CheckReport:
    return check_gradients(a.as_dict(), b.as_dict(), tol, name)
