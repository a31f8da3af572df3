"""Portable core kernels.

Stateless, correctness-first implementations over densely packed numpy
views. Float ops compute and accumulate in float32; integer elementwise ops
stay in their storage dtype. Every kernel derives its actual output shape
from its inputs and writes through the provided slot, which copies into the
pre-planned arena region.
"""

from __future__ import annotations

import numpy as np

from .registry import register_kernel

_F32 = np.float32


def _as_f32(a):
    return a if isinstance(a, np.ndarray) else _F32(a)


def _binary(fn):
    def kernel(args, attrs, out):
        a, b = (_as_f32(x) if _anchor_float(args) else _as_int(x, args) for x in args)
        out.write(fn(a, b))
    return kernel


def _anchor_float(args) -> bool:
    for a in args:
        if isinstance(a, np.ndarray):
            return a.dtype == np.float32
    return True


def _as_int(x, args):
    if isinstance(x, np.ndarray):
        return x
    anchor = next(a for a in args if isinstance(a, np.ndarray))
    return anchor.dtype.type(x)


for _op, _fn in (("core.add", np.add), ("core.sub", np.subtract), ("core.mul", np.multiply)):
    for _sig in (("F32", "F32"), ("F32",), ("I64", "I64"), ("I64",), ("I32", "I32"), ("I32",)):
        register_kernel(_op, _sig)(_binary(_fn))

for _sig in (("F32", "F32"), ("F32",)):
    register_kernel("core.div", _sig)(_binary(np.divide))


def _unary(fn):
    def kernel(args, attrs, out):
        out.write(fn(args[0]))
    return kernel


register_kernel("core.neg", ("F32",))(_unary(np.negative))
register_kernel("core.exp", ("F32",))(_unary(np.exp))
register_kernel("core.rsqrt", ("F32",))(_unary(lambda x: _F32(1.0) / np.sqrt(x)))
register_kernel("core.relu", ("F32",))(_unary(lambda x: np.maximum(x, _F32(0.0))))
register_kernel("core.sigmoid", ("F32",))(_unary(lambda x: _F32(1.0) / (_F32(1.0) + np.exp(-x))))


@register_kernel("core.matmul", ("F32", "F32"))
def _matmul(args, attrs, out):
    out.write(args[0] @ args[1])


def _linear(args, attrs, out):
    y = args[0] @ args[1].T
    if len(args) == 3:
        y = y + args[2]
    out.write(y)


register_kernel("core.linear", ("F32", "F32"))(_linear)
register_kernel("core.linear", ("F32", "F32", "F32"))(_linear)


@register_kernel("core.softmax", ("F32",))
def _softmax(args, attrs, out):
    x = args[0]
    axis = int(attrs.get("axis", -1))
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out.write(e / np.sum(e, axis=axis, keepdims=True))


def _permute_copy(args, attrs, out):
    out.write(np.ascontiguousarray(np.transpose(args[0], attrs["perm"])))


def _slice_copy(args, attrs, out):
    x = args[0]
    axis = int(attrs.get("axis", 0)) % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(int(attrs["start"]), int(attrs["end"]))
    out.write(np.ascontiguousarray(x[tuple(sl)]))


def _cat(args, attrs, out):
    out.write(np.concatenate(args, axis=int(attrs.get("axis", 0))))


def _copy_(args, attrs, out):
    out.write(args[0])


for _dt in ("F32", "I64", "I32", "I8"):
    register_kernel("core.permute_copy", (_dt,))(_permute_copy)
    register_kernel("core.slice_copy", (_dt,))(_slice_copy)
    register_kernel("core.cat", (_dt,))(_cat)
    register_kernel("core.copy_", (_dt,), mutates_state=True)(_copy_)


def _embedding(args, attrs, out):
    table, idx = args
    out.write(np.ascontiguousarray(table[idx]))


register_kernel("core.embedding", ("F32", "I64"))(_embedding)
register_kernel("core.embedding", ("F32", "I32"))(_embedding)


@register_kernel("core.mean_dim", ("F32",))
def _mean_dim(args, attrs, out):
    x = args[0]
    axis = int(attrs.get("axis", -1))
    out.write(np.mean(x, axis=axis, keepdims=bool(attrs.get("keepdim", False)), dtype=np.float32))
