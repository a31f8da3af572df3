"""Quantization arithmetic: affine maps, weight quantizers, packed tensors.

All rounding is half-to-even so results are identical across platforms.
Degenerate (all-zero) granules take a 1e-8 scale floor, which maps every
code to zero instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ..errors import IndivisibleGroup, NonPositiveScale
from ..tensors import DType, pack_u4, unpack_u4

SCALE_FLOOR = 1e-8

Scheme = Literal["per_tensor", "per_channel", "per_group"]


@dataclass(frozen=True)
class QuantSpec:
    """Quantization intent for one tensor: target storage type, granularity,
    range, and how calibration observes it."""

    target_dtype: DType
    scheme: Scheme
    axis: int | None = None
    group_size: int | None = None
    symmetric: bool = True
    qmin: int = -127
    qmax: int = 127
    observer: str = "minmax"
    dynamic: bool = False

    def __post_init__(self):
        if self.target_dtype not in (DType.I8, DType.PACKED_U4):
            raise ValueError(f"unsupported quantization target {self.target_dtype}")
        if self.scheme == "per_channel" and self.axis is None:
            raise ValueError("per_channel requires an axis")
        if self.scheme == "per_group" and (self.axis is None or not self.group_size or self.group_size <= 0):
            raise ValueError("per_group requires an axis and a positive group_size")
        if self.qmin >= self.qmax:
            raise ValueError(f"empty quantized range [{self.qmin}, {self.qmax}]")


# stock recipes; group sizes of 32 and 128 are the supported defaults
STATIC_I8_ACT = QuantSpec(DType.I8, "per_tensor", symmetric=True, qmin=-127, qmax=127)
STATIC_I8_WEIGHT = QuantSpec(DType.I8, "per_channel", axis=0, symmetric=True, qmin=-127, qmax=127)
DYN_I8_ACT = QuantSpec(DType.I8, "per_tensor", symmetric=False, qmin=-128, qmax=127, dynamic=True)


def group_w4_spec(group_size: int) -> QuantSpec:
    return QuantSpec(DType.PACKED_U4, "per_group", axis=1, group_size=group_size,
                     symmetric=True, qmin=-7, qmax=7)


def affine_quantize(x: np.ndarray, scale: float, zero_point: int,
                    qmin: int, qmax: int) -> np.ndarray:
    """q = clamp(round_half_even(x / scale) + zp, qmin, qmax)."""
    if scale <= 0:
        raise NonPositiveScale(f"scale must be > 0, got {scale}")
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(x / scale) + zero_point, qmin, qmax)
    out_dtype = np.int8 if qmin >= -128 and qmax <= 127 else np.int32
    return q.astype(out_dtype)


def affine_dequantize(q: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    if scale <= 0:
        raise NonPositiveScale(f"scale must be > 0, got {scale}")
    return ((np.asarray(q, dtype=np.float64) - zero_point) * scale).astype(np.float32)


def symmetric_scale(lo: float, hi: float, qmax: int) -> float:
    """Scale for a symmetric range covering [lo, hi]; floored for all-zero."""
    bound = max(abs(lo), abs(hi))
    return max(bound / qmax, SCALE_FLOOR)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer payload plus quantization parameters.

    For PACKED_U4, ``qdata`` holds nibble-pair bytes (low nibble first,
    codes stored offset-by-8); otherwise it holds int8 values. Scales carry
    one entry per granule; symmetric tensors have an empty zero_points.
    """

    qdata: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    spec: QuantSpec
    original_shape: tuple[int, ...]

    def __post_init__(self):
        if np.any(self.scales <= 0):
            raise NonPositiveScale("all scales must be > 0")
        expected = granule_count(self.spec, self.original_shape)
        if self.scales.size != expected:
            raise ValueError(f"{self.scales.size} scales for {expected} granules")
        if not self.spec.symmetric and self.zero_points.size != expected:
            raise ValueError("asymmetric tensor needs one zero point per granule")

    @property
    def payload_nbytes(self) -> int:
        return int(self.qdata.nbytes)

    @property
    def serialized_nbytes(self) -> int:
        """Payload + quantization parameters, as stored in a container."""
        return int(self.qdata.nbytes + self.scales.nbytes + self.zero_points.nbytes)

    def dequantize(self) -> np.ndarray:
        n = int(np.prod(self.original_shape))
        if self.spec.target_dtype is DType.PACKED_U4:
            codes = (unpack_u4(self.qdata, n).astype(np.int16) - 8).astype(np.float64)
        else:
            codes = self.qdata.astype(np.float64).reshape(-1)
        codes = codes.reshape(self.original_shape)
        if self.spec.scheme == "per_tensor":
            return ((codes - _zp0(self)) * float(self.scales.reshape(-1)[0])).astype(np.float32)
        if self.spec.scheme == "per_channel":
            shape = [1] * len(self.original_shape)
            shape[self.spec.axis] = -1
            zps = self.zero_points.reshape(shape) if self.zero_points.size else 0
            return ((codes - zps) * self.scales.reshape(shape)).astype(np.float32)
        # per_group over axis 1 of a 2D matrix
        rows, k = self.original_shape
        gs = self.spec.group_size
        grouped = codes.reshape(rows, k // gs, gs)
        out = grouped * self.scales.reshape(rows, k // gs, 1)
        return out.reshape(rows, k).astype(np.float32)


def _zp0(t: QuantizedTensor) -> int:
    return int(t.zero_points.reshape(-1)[0]) if t.zero_points.size else 0


def granule_count(spec: QuantSpec, shape: tuple[int, ...]) -> int:
    if spec.scheme == "per_tensor":
        return 1
    if spec.scheme == "per_channel":
        return int(shape[spec.axis])
    rows = int(np.prod([d for i, d in enumerate(shape) if i != spec.axis]))
    return rows * (int(shape[spec.axis]) // spec.group_size)


def quantize_weight_per_channel(w: np.ndarray, axis: int = 0) -> QuantizedTensor:
    """Symmetric int8, one scale per slice along ``axis``."""
    w = np.asarray(w, dtype=np.float64)
    moved = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    bounds = np.abs(moved).max(axis=1)
    scales = np.maximum(bounds / 127.0, SCALE_FLOOR)
    shape = [1] * w.ndim
    shape[axis] = -1
    q = np.clip(np.rint(w / scales.reshape(shape)), -127, 127).astype(np.int8)
    spec = QuantSpec(DType.I8, "per_channel", axis=axis, symmetric=True, qmin=-127, qmax=127)
    return QuantizedTensor(q, scales.astype(np.float32), np.empty(0, dtype=np.int32),
                           spec, tuple(w.shape))


def quantize_weight_groupwise(w: np.ndarray, bitwidth: int = 4,
                              group_size: int = 32) -> QuantizedTensor:
    """Symmetric 4-bit group-wise weights: per (row, group) scale =
    max|x| / 7, codes in [-7, 7] stored as offset-by-8 nibbles packed two
    per byte."""
    if bitwidth != 4:
        raise ValueError(f"only 4-bit group-wise weights are supported, got {bitwidth}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise IndivisibleGroup(f"group-wise quantization expects a 2D matrix, got rank {w.ndim}")
    rows, k = w.shape
    if group_size <= 0 or k % group_size != 0:
        raise IndivisibleGroup(f"inner dim {k} not divisible by group size {group_size}")
    grouped = w.reshape(rows, k // group_size, group_size)
    scales = np.maximum(np.abs(grouped).max(axis=2) / 7.0, SCALE_FLOOR)
    codes = np.clip(np.rint(grouped / scales[:, :, None]), -7, 7).astype(np.int16)
    packed = pack_u4((codes + 8).astype(np.uint8).reshape(-1))
    spec = group_w4_spec(group_size)
    return QuantizedTensor(packed, scales.astype(np.float32), np.empty(0, dtype=np.int32),
                           spec, (rows, k))
