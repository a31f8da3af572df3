"""Tensor dtypes and the shared base64 payload schema.

One payload schema is used everywhere a tensor crosses a file boundary:
model constants and states, CLI input files, and golden output files. An
entry is ``{"dtype": ..., "shape": [...], "data": <base64 little-endian>}``.
"""

from __future__ import annotations

import base64
from enum import Enum
from typing import Any

import numpy as np

from .errors import SchemaError


class DType(str, Enum):
    F32 = "F32"
    I64 = "I64"
    I32 = "I32"
    I8 = "I8"
    U8_BOOL = "U8_BOOL"
    PACKED_U4 = "PACKED_U4"

    @property
    def element_bytes(self) -> float:
        return _ELEMENT_BYTES[self]

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self]


_ELEMENT_BYTES = {
    DType.F32: 4.0,
    DType.I64: 8.0,
    DType.I32: 4.0,
    DType.I8: 1.0,
    DType.U8_BOOL: 1.0,
    DType.PACKED_U4: 0.5,
}

# PACKED_U4 payloads are raw nibble-pair bytes; uint8 is the storage view.
_NP_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.I64: np.dtype("<i8"),
    DType.I32: np.dtype("<i4"),
    DType.I8: np.dtype("<i1"),
    DType.U8_BOOL: np.dtype("<u1"),
    DType.PACKED_U4: np.dtype("<u1"),
}

_FROM_NP = {
    np.dtype("float32"): DType.F32,
    np.dtype("float64"): DType.F32,
    np.dtype("int64"): DType.I64,
    np.dtype("int32"): DType.I32,
    np.dtype("int8"): DType.I8,
    np.dtype("uint8"): DType.U8_BOOL,
    np.dtype("bool"): DType.U8_BOOL,
}


def parse_dtype(name: str) -> DType:
    try:
        return DType(name)
    except ValueError:
        raise SchemaError(f"unknown dtype {name!r}") from None


def dtype_of_array(arr: np.ndarray) -> DType:
    try:
        return _FROM_NP[arr.dtype]
    except KeyError:
        raise SchemaError(f"unsupported array dtype {arr.dtype}") from None


def payload_nbytes(dtype: DType, shape: tuple[int, ...]) -> int:
    """Byte size of a densely packed tensor; 4-bit payloads round up."""
    n = 1
    for d in shape:
        n *= d
    if dtype is DType.PACKED_U4:
        return (n + 1) // 2
    return int(n * dtype.element_bytes)


def encode_tensor(arr: np.ndarray, dtype: DType | None = None) -> dict[str, Any]:
    """Encode an array as a payload schema entry (little-endian bytes)."""
    if dtype is None:
        dtype = dtype_of_array(arr)
    if dtype is DType.PACKED_U4:
        raise SchemaError("packed 4-bit tensors require an explicit shape; use encode_packed")
    data = np.ascontiguousarray(arr, dtype=dtype.np_dtype)
    return {
        "dtype": dtype.value,
        "shape": [int(d) for d in arr.shape],
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def encode_packed(raw: bytes, shape: tuple[int, ...]) -> dict[str, Any]:
    """Encode a packed 4-bit payload; shape counts logical elements."""
    expected = payload_nbytes(DType.PACKED_U4, shape)
    if len(raw) != expected:
        raise SchemaError(f"packed payload is {len(raw)} bytes, expected {expected}")
    return {
        "dtype": DType.PACKED_U4.value,
        "shape": [int(d) for d in shape],
        "data": base64.b64encode(raw).decode("ascii"),
    }


def decode_tensor(entry: dict[str, Any]) -> tuple[DType, tuple[int, ...], np.ndarray]:
    """Decode a payload entry to (dtype, shape, array).

    Packed 4-bit entries decode to the flat uint8 byte payload; everything
    else decodes to an array of the stated shape.
    """
    for key in ("dtype", "shape", "data"):
        if key not in entry:
            raise SchemaError(f"payload entry missing {key!r}")
    dtype = parse_dtype(entry["dtype"])
    shape = _parse_concrete_shape(entry["shape"])
    try:
        raw = base64.b64decode(entry["data"], validate=True)
    except Exception as exc:
        raise SchemaError(f"payload is not valid base64: {exc}") from None
    expected = payload_nbytes(dtype, shape)
    if len(raw) != expected:
        raise SchemaError(f"payload is {len(raw)} bytes, expected {expected} for {dtype.value}{list(shape)}")
    if dtype is DType.PACKED_U4:
        return dtype, shape, np.frombuffer(raw, dtype=np.uint8).copy()
    arr = np.frombuffer(raw, dtype=dtype.np_dtype).reshape(shape).copy()
    return dtype, shape, arr


def pack_u4(nibbles: np.ndarray) -> np.ndarray:
    """Pack unsigned 4-bit codes (0..15) two per byte, low nibble first.
    Odd-length inputs pad the final high nibble with zero."""
    nibbles = np.asarray(nibbles, dtype=np.uint8).reshape(-1)
    if np.any(nibbles > 15):
        raise ValueError("nibble values must be < 16")
    if nibbles.size % 2:
        nibbles = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)


def unpack_u4(packed: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pack_u4: recover the first ``n`` unsigned nibble codes."""
    packed = np.asarray(packed, dtype=np.uint8).reshape(-1)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def _parse_concrete_shape(shape: Any) -> tuple[int, ...]:
    if not isinstance(shape, (list, tuple)):
        raise SchemaError("shape must be a list")
    out = []
    for d in shape:
        if not isinstance(d, int) or isinstance(d, bool) or d < 0:
            raise SchemaError(f"payload shapes must be concrete sizes >= 0, got {d!r}")
        out.append(d)
    return tuple(out)
