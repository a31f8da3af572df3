"""Quantized kernels: affine (de)quantization, per-token parameter
computation, and the int8 / grouped-int4 linear ops.

Dot products accumulate in int32 (int64 under numpy, asserted to stay in
int32 range); rescaling multiplies the centered accumulator by the combined
activation and weight scales in float32. Affine parameter math runs in
float64 so quantization decisions are identical to the eager reference.
"""

from __future__ import annotations

import numpy as np

from ..errors import GroupMismatch
from ..tensors import unpack_u4
from .registry import register_kernel

_QPARAM_FLOOR = 1e-8
_I32_MAX = np.int64(2**31 - 1)


def _quantize_static(args, attrs, out):
    x, scale, zp = args
    qmin = int(attrs.get("qmin", -127))
    qmax = int(attrs.get("qmax", 127))
    q = np.clip(np.rint(x.astype(np.float64) / float(scale)) + int(zp), qmin, qmax)
    out.write(q.astype(np.int8))


def _quantize_per_token(args, attrs, out):
    x, qp = args
    qmin = int(attrs.get("qmin", -128))
    qmax = int(attrs.get("qmax", 127))
    scale = qp[:, 0:1].astype(np.float64)
    zp = qp[:, 1:2].astype(np.float64)
    q = np.clip(np.rint(x.astype(np.float64) / scale) + zp, qmin, qmax)
    out.write(q.astype(np.int8))


register_kernel("q.quantize_per_tensor", ("F32",))(_quantize_static)
register_kernel("q.quantize_per_tensor", ("F32", "F32"))(_quantize_per_token)


def _dequantize_per_tensor(args, attrs, out):
    q, scale, zp = args
    y = (q.astype(np.float64) - int(zp)) * float(scale)
    out.write(y.astype(np.float32))


def _dequantize_per_channel(args, attrs, out):
    q, scales = args
    axis = int(attrs.get("axis", 0)) % q.ndim
    shape = [1] * q.ndim
    shape[axis] = -1
    y = q.astype(np.float64) * scales.astype(np.float64).reshape(shape)
    out.write(y.astype(np.float32))


register_kernel("q.dequantize_per_tensor", ("I8",))(_dequantize_per_tensor)
register_kernel("q.dequantize_per_tensor", ("I8", "F32"))(_dequantize_per_channel)


def choose_qparams_per_token(x: np.ndarray, qmin: int = -128, qmax: int = 127) -> np.ndarray:
    """Per-row asymmetric affine parameters with the range widened to
    include zero; degenerate rows take the scale floor. Returns [T, 2]
    float32 (scale, zero point)."""
    x64 = x.astype(np.float64)
    mn = np.minimum(x64.min(axis=-1), 0.0)
    mx = np.maximum(x64.max(axis=-1), 0.0)
    scale = (mx - mn) / (qmax - qmin)
    scale = np.where(scale < _QPARAM_FLOOR, _QPARAM_FLOOR, scale)
    zp = np.clip(qmin - np.rint(mn / scale), qmin, qmax)
    return np.stack([scale, zp], axis=-1).astype(np.float32)


@register_kernel("q.choose_qparams_per_token", ("F32",))
def _choose_qparams(args, attrs, out):
    out.write(choose_qparams_per_token(args[0], int(attrs.get("qmin", -128)),
                                       int(attrs.get("qmax", 127))))


def _check_acc_bound(k: int) -> None:
    # worst case |acc| = K * 128 * 128; must stay in int32 like a real
    # fixed-width accumulator would
    if np.int64(k) * 128 * 128 > _I32_MAX:
        raise GroupMismatch(f"reduction dim {k} overflows the int32 accumulator contract")


def _linear_8w(args, attrs, out):
    xq, xs, xzp, wq, ws = args[:5]
    _check_acc_bound(xq.shape[1])
    acc = xq.astype(np.int32) @ wq.astype(np.int32).T
    wsum = wq.astype(np.int32).sum(axis=1)
    centered = (acc - int(xzp) * wsum[None, :]).astype(np.float32)
    y = centered * (np.float32(xs) * ws)[None, :]
    if len(args) == 6:
        y = y + args[5]
    out.write(y)


register_kernel("q.linear_8w", ("I8", "I8", "F32"))(_linear_8w)
register_kernel("q.linear_8w", ("I8", "I8", "F32", "F32"))(_linear_8w)


def unpack_group_weights(packed: np.ndarray, n_out: int, k: int) -> np.ndarray:
    """Packed nibble payload -> int8 code matrix [n_out, k] in [-8, 7]."""
    codes = unpack_u4(packed, n_out * k).astype(np.int16) - 8
    return codes.astype(np.int8).reshape(n_out, k)


def _linear_4w(args, attrs, out):
    xq, qp, packed, ws = args[:4]
    gs = int(attrs["group_size"])
    n_out, n_groups = ws.shape
    k = n_groups * gs
    if xq.shape[1] != k:
        raise GroupMismatch(f"activations have {xq.shape[1]} features, weights expect {k}")
    _check_acc_bound(gs)
    wq = unpack_group_weights(packed, n_out, k)
    t = xq.shape[0]
    xg = xq.astype(np.int32).reshape(t, n_groups, gs)
    wg = wq.astype(np.int32).reshape(n_out, n_groups, gs)
    acc = np.einsum("tgk,ngk->tng", xg, wg, dtype=np.int32)
    wsum = wg.sum(axis=2, dtype=np.int32)
    zp = qp[:, 1].astype(np.int32)
    centered = (acc - zp[:, None, None] * wsum[None, :, :]).astype(np.float32)
    y = (centered * ws[None, :, :]).sum(axis=2) * qp[:, 0][:, None]
    if len(args) == 5:
        y = y + args[4]
    out.write(y.astype(np.float32))


register_kernel("q.linear_4w", ("I8", "F32", "PACKED_U4", "F32"))(_linear_4w)
register_kernel("q.linear_4w", ("I8", "F32", "PACKED_U4", "F32", "F32"))(_linear_4w)
