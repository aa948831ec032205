"""Direct 2-D convolution (cross-correlation) with zero padding.

Loops run over kernel taps only; each tap is one tensordot over channels.
Accumulation is in float64 in a fixed tap order, so results are
deterministic for a fixed BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ipabn.errors import ShapeError
from ipabn.kernels import tensor_core as tc


@dataclass(frozen=True)
class ConvParams:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4 or min(w.shape) < 1:
            raise ShapeError(f"conv weights must be (out, in, kh, kw) with all dims >= 1, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv bias {b.shape} for {w.shape[0]} output channels")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"stride {self.stride} must be >= 1 and padding {self.padding} >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", tuple(self.stride))
        object.__setattr__(self, "padding", tuple(self.padding))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, int, int, int]:
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        oh = output_size(h, self.kernel[0], self.stride[0], self.padding[0])
        ow = output_size(w, self.kernel[1], self.stride[1], self.padding[1])
        return n, self.out_channels, oh, ow


@dataclass(frozen=True)
class ConvGradients:
    dL_dz: np.ndarray
    dL_dweights: np.ndarray
    dL_dbias: np.ndarray


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"output dimension {out} < 1 for input {size}, kernel {kernel}, stride {stride}, padding {padding}"
        )
    return out


def _pad(z: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return z
    return np.pad(z, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _window(zp: np.ndarray, i: int, j: int, oh: int, ow: int, stride: tuple[int, int]) -> np.ndarray:
    sh, sw = stride
    return zp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]


def conv_forward(z: np.ndarray, p: ConvParams) -> np.ndarray:
    n, o, oh, ow = p.output_shape(z.shape)
    zp = _pad(z, p.padding)
    weights = p.weights.astype(np.float64, copy=False)
    acc = np.zeros((n, oh, ow, o), dtype=np.float64)
    kh, kw = p.kernel
    for i in range(kh):
        for j in range(kw):
            window = _window(zp, i, j, oh, ow, p.stride)
            # (n, c, oh, ow) x (o, c) -> (n, oh, ow, o)
            acc += np.tensordot(window, weights[:, :, i, j], axes=([1], [1]))
    acc += p.bias.astype(np.float64)
    out = np.ascontiguousarray(np.moveaxis(acc, 3, 1), dtype=z.dtype)
    tc.record_pass(out)
    return out


def conv_backward(z: np.ndarray, p: ConvParams, dL_dout: np.ndarray) -> ConvGradients:
    expected = p.output_shape(z.shape)
    if dL_dout.shape != expected:
        raise ShapeError(f"conv output gradient {dL_dout.shape}, forward produced {expected}")
    _, _, oh, ow = expected
    zp = _pad(z, p.padding)
    g = dL_dout.astype(np.float64, copy=False)
    weights = p.weights.astype(np.float64, copy=False)

    dL_dbias = np.sum(g, axis=(0, 2, 3))
    dL_dweights = np.zeros(p.weights.shape, dtype=np.float64)
    dzp = np.zeros(zp.shape, dtype=np.float64)
    kh, kw = p.kernel
    sh, sw = p.stride
    for i in range(kh):
        for j in range(kw):
            window = _window(zp, i, j, oh, ow, p.stride)
            # (n, o, oh, ow) x (n, c, oh, ow) -> (o, c)
            dL_dweights[:, :, i, j] = np.tensordot(g, window, axes=([0, 2, 3], [0, 2, 3]))
            # (n, o, oh, ow) x (o, c) -> (n, oh, ow, c)
            contribution = np.tensordot(g, weights[:, :, i, j], axes=([1], [0]))
            dzp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += np.moveaxis(
                contribution, 3, 1
            )
    ph, pw = p.padding
    dL_dz = dzp[:, :, ph : ph + z.shape[2], pw : pw + z.shape[3]]
    tc.record_pass(dL_dout)
    tc.record_pass(dL_dout)
    tc.record_pass(z)
    return ConvGradients(
        np.ascontiguousarray(dL_dz, dtype=z.dtype),
        dL_dweights.astype(p.weights.dtype, copy=False),
        dL_dbias.astype(p.bias.dtype, copy=False),
    )
