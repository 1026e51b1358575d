"""Quantized tensor core: affine int8 quantization parameters and the
quantize / dequantize / requantize arithmetic every kernel builds on.

Conventions:
  * activations: per-tensor affine (scale + zero-point)
  * weights: per-tensor symmetric (zero-point 0)
  * rounding: round-half-to-even everywhere, so results are bit-exact
    across runs and platforms
  * the requantization multiplier is applied in double precision; a
    fixed-point port only needs to replace `requantize`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT8_MIN = -128
INT8_MAX = 127


class QuantizationError(ValueError):
    """Invalid quantization parameters or unquantizable input."""


def f32(x) -> float:
    """Round to the nearest float32 value; scales are stored as f32 in the
    model format, so creating them pre-rounded keeps round-trips exact."""
    return float(np.float32(x))


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        zp = self.zero_point
        if int(zp) != zp or not (INT8_MIN <= zp <= INT8_MAX):
            raise QuantizationError(f"zero_point must be an int8 value, got {zp}")


@dataclass
class QTensor:
    """Int8 tensor with affine quantization parameters.

    `data` may be a view (e.g. a transposed or sliced window of an arena
    region); storage order of owned tensors is row-major.  Values are
    treated as immutable except by the explicitly in-place kernels, which
    own the destination region.
    """

    data: np.ndarray
    qp: QuantParams

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise QuantizationError(f"QTensor data must be int8, got {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


def quantize(x: np.ndarray, qp: QuantParams) -> QTensor:
    """Quantize a float tensor: q = clamp(rint(x / scale) + zp, -128, 127)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        idx = np.argwhere(~np.isfinite(x))[0]
        raise QuantizationError(f"non-finite input element at index {tuple(int(i) for i in idx)}")
    q = np.clip(np.rint(x / qp.scale) + qp.zero_point, INT8_MIN, INT8_MAX)
    return QTensor(q.astype(np.int8), qp)


def dequantize(q: QTensor) -> np.ndarray:
    """x = (q - zero_point) * scale, as float64."""
    return (q.data.astype(np.float64) - q.qp.zero_point) * q.qp.scale


def requantize(acc, multiplier: float, zp_out: int) -> np.ndarray:
    """Map int32 accumulators back to int8.

    multiplier is (scale_a * scale_b) / scale_out, precomputed per operator.
    """
    acc = np.asarray(acc)
    q = np.clip(np.rint(acc.astype(np.float64) * multiplier) + zp_out, INT8_MIN, INT8_MAX)
    return q.astype(np.int8)


def requantize_scalar(acc: int, multiplier: float, zp_out: int) -> int:
    """Scalar requantize; kept separate so the reference kernels stay plain."""
    q = round(acc * multiplier) + zp_out
    return max(INT8_MIN, min(INT8_MAX, int(q)))
