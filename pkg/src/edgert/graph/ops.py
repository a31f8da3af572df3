"""Per-operator shape and dtype rules.

Each rule maps operand specs (or scalar literals) plus attrs to the output
spec, raising ShapeError/ArityError when the operands do not satisfy the
operator's semantics. Shape inference, the parser, and the edge checker all
go through this table, so a graph that constructs successfully is shape
sound by construction.

Symbolic dims participate structurally: two dims match when they are the
same concrete size or the same symbol; a size-1 dim broadcasts against
anything; a symbol never unifies with a differing concrete size.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping, Sequence, Union

from ..errors import ArityError, ShapeError, UnknownOp
from ..tensors import DType
from .types import CORE_OPS, HL_OPS, Dim, Literal, SymbolBound, TensorSpec

Arg = Union[TensorSpec, Literal]


class RuleContext:
    """Carries symbol bounds so rules can check export-time bounds."""

    def __init__(self, bounds: Mapping[str, SymbolBound]):
        self.bounds = bounds

    def dim_upper(self, d: Dim) -> int:
        if isinstance(d, int):
            return d
        if d not in self.bounds:
            raise ShapeError(f"symbol {d!r} has no declared bounds")
        return self.bounds[d].max


def is_tensor(a: Arg) -> bool:
    return isinstance(a, TensorSpec)


def _tensor(args: Sequence[Arg], i: int, op: str) -> TensorSpec:
    if i >= len(args) or not is_tensor(args[i]):
        raise ArityError(f"{op}: operand {i} must be a tensor")
    return args[i]  # type: ignore[return-value]


def _expect_arity(op: str, args: Sequence[Arg], *counts: int) -> None:
    if len(args) not in counts:
        raise ArityError(f"{op} takes {' or '.join(map(str, counts))} operands, got {len(args)}")


def _expect_dtype(op: str, spec: TensorSpec, allowed: set[DType], what: str) -> None:
    if spec.dtype not in allowed:
        names = "/".join(sorted(d.value for d in allowed))
        raise ShapeError(f"{op}: {what} must be {names}, got {spec.dtype.value}")


def dims_match(a: Dim, b: Dim) -> bool:
    return a == b


def _broadcast_dim(a: Dim, b: Dim, op: str) -> Dim:
    if dims_match(a, b):
        return a
    if a == 1:
        return b
    if b == 1:
        return a
    raise ShapeError(f"{op}: no broadcast rule for dims {a} and {b}")


def broadcast_shapes(a: tuple[Dim, ...], b: tuple[Dim, ...], op: str) -> tuple[Dim, ...]:
    """Right-aligned elementwise broadcast; symbols only unify with
    themselves or size-1 dims."""
    out: list[Dim] = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        out.append(_broadcast_dim(da, db, op))
    return tuple(reversed(out))


def _int_attr(attrs: Mapping[str, Any], key: str, op: str, default: int | None = None) -> int:
    if key not in attrs:
        if default is not None:
            return default
        raise ShapeError(f"{op}: missing required attr {key!r}")
    v = attrs[key]
    if not isinstance(v, int) or isinstance(v, bool):
        raise ShapeError(f"{op}: attr {key!r} must be an int, got {v!r}")
    return v


_NUMERIC = {DType.F32, DType.I32, DType.I64}


def _binary_elementwise(op: str, args: Sequence[Arg], attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 2)
    ta = args[0] if is_tensor(args[0]) else None
    tb = args[1] if is_tensor(args[1]) else None
    if ta is None and tb is None:
        raise ArityError(f"{op}: at least one operand must be a tensor")
    if ta is not None and tb is not None:
        _expect_dtype(op, ta, _NUMERIC, "lhs")
        if ta.dtype is not tb.dtype:
            raise ShapeError(f"{op}: operand dtypes differ ({ta.dtype.value} vs {tb.dtype.value})")
        shape = broadcast_shapes(ta.shape, tb.shape, op)
        return TensorSpec(ta.dtype, shape)
    t = ta if ta is not None else tb
    assert t is not None
    _expect_dtype(op, t, _NUMERIC, "tensor operand")
    return TensorSpec(t.dtype, t.shape)


def _binary_float(op: str, args: Sequence[Arg], attrs, ctx) -> TensorSpec:
    spec = _binary_elementwise(op, args, attrs, ctx)
    if spec.dtype is not DType.F32:
        raise ShapeError(f"{op}: only defined for F32 operands")
    return spec


def _unary_float(op: str, args: Sequence[Arg], attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    t = _tensor(args, 0, op)
    _expect_dtype(op, t, {DType.F32}, "operand")
    return TensorSpec(DType.F32, t.shape)


def _rule_matmul(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 2)
    a = _tensor(args, 0, op)
    b = _tensor(args, 1, op)
    _expect_dtype(op, a, {DType.F32}, "lhs")
    _expect_dtype(op, b, {DType.F32}, "rhs")
    if a.rank < 2 or b.rank < 2:
        raise ShapeError(f"{op}: operands must have rank >= 2, got {a.rank} and {b.rank}")
    if not dims_match(a.shape[-1], b.shape[-2]):
        raise ShapeError(f"{op}: inner dims {a.shape[-1]} and {b.shape[-2]} do not match")
    if b.rank == 2:
        return TensorSpec(DType.F32, a.shape[:-1] + (b.shape[-1],))
    if a.rank == b.rank and a.shape[:-2] == b.shape[:-2]:
        return TensorSpec(DType.F32, a.shape[:-1] + (b.shape[-1],))
    raise ShapeError(f"{op}: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not match")


def _rule_linear(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 2, 3)
    x = _tensor(args, 0, op)
    w = _tensor(args, 1, op)
    _expect_dtype(op, x, {DType.F32}, "input")
    _expect_dtype(op, w, {DType.F32}, "weight")
    if x.rank < 1 or w.rank != 2:
        raise ShapeError(f"{op}: expects input rank >= 1 and weight rank 2")
    if not dims_match(x.shape[-1], w.shape[1]):
        raise ShapeError(f"{op}: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    if len(args) == 3:
        b = _tensor(args, 2, op)
        if b.rank != 1 or not dims_match(b.shape[0], w.shape[0]):
            raise ShapeError(f"{op}: bias shape {b.shape} does not match out-features {w.shape[0]}")
    return TensorSpec(DType.F32, x.shape[:-1] + (w.shape[0],))


def _rule_softmax(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    t = _tensor(args, 0, op)
    _expect_dtype(op, t, {DType.F32}, "operand")
    axis = _int_attr(attrs, "axis", op, default=-1)
    _normalize_axis(axis, t.rank, op)
    return TensorSpec(DType.F32, t.shape)


def _normalize_axis(axis: int, rank: int, op: str) -> int:
    if not -rank <= axis < rank:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def _rule_permute_copy(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    t = _tensor(args, 0, op)
    perm = attrs.get("perm")
    if not isinstance(perm, (list, tuple)) or sorted(perm) != list(range(t.rank)):
        raise ShapeError(f"{op}: perm {perm!r} is not a permutation of 0..{t.rank - 1}")
    return TensorSpec(t.dtype, tuple(t.shape[p] for p in perm))


def _rule_slice_copy(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    t = _tensor(args, 0, op)
    axis = _normalize_axis(_int_attr(attrs, "axis", op, default=0), t.rank, op)
    start = _int_attr(attrs, "start", op)
    end = _int_attr(attrs, "end", op)
    size = t.shape[axis]
    if not isinstance(size, int):
        raise ShapeError(f"{op}: cannot slice symbolic dim {size!r}")
    if not 0 <= start <= end <= size:
        raise ShapeError(f"{op}: slice [{start}, {end}) out of bounds for size {size}")
    shape = list(t.shape)
    shape[axis] = end - start
    return TensorSpec(t.dtype, tuple(shape))


def _rule_cat(op, args, attrs, ctx) -> TensorSpec:
    if len(args) < 1:
        raise ArityError(f"{op}: needs at least one operand")
    tensors = [_tensor(args, i, op) for i in range(len(args))]
    first = tensors[0]
    axis = _normalize_axis(_int_attr(attrs, "axis", op, default=0), first.rank, op)
    total: Dim = 0
    for t in tensors:
        if t.dtype is not first.dtype or t.rank != first.rank:
            raise ShapeError(f"{op}: operands must share dtype and rank")
        for i in range(first.rank):
            if i != axis and not dims_match(t.shape[i], first.shape[i]):
                raise ShapeError(f"{op}: dim {i} mismatch ({t.shape[i]} vs {first.shape[i]})")
        d = t.shape[axis]
        if not isinstance(d, int) or not isinstance(total, int):
            raise ShapeError(f"{op}: concatenation along a symbolic dim is not supported")
        total += d
    shape = list(first.shape)
    shape[axis] = total
    return TensorSpec(first.dtype, tuple(shape))


def _rule_embedding(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 2)
    w = _tensor(args, 0, op)
    idx = _tensor(args, 1, op)
    _expect_dtype(op, w, {DType.F32}, "table")
    _expect_dtype(op, idx, {DType.I64, DType.I32}, "indices")
    if w.rank != 2:
        raise ShapeError(f"{op}: table must be rank 2, got {w.rank}")
    return TensorSpec(DType.F32, idx.shape + (w.shape[1],))


def _rule_mean_dim(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    t = _tensor(args, 0, op)
    _expect_dtype(op, t, {DType.F32}, "operand")
    axis = _normalize_axis(_int_attr(attrs, "axis", op, default=-1), t.rank, op)
    keepdim = bool(attrs.get("keepdim", False))
    shape = list(t.shape)
    if keepdim:
        shape[axis] = 1
    else:
        del shape[axis]
    return TensorSpec(DType.F32, tuple(shape))


def _rule_copy_(op, args, attrs, ctx) -> TensorSpec:
    # output spec equals the (state) destination; dest is resolved by the
    # caller, which passes it as the second operand here.
    _expect_arity(op, args, 2)
    src = _tensor(args, 0, op)
    dst = _tensor(args, 1, op)
    if src.dtype is not dst.dtype or src.shape != dst.shape:
        raise ShapeError(f"{op}: source spec {src.dtype.value}{src.shape} must equal "
                         f"state spec {dst.dtype.value}{dst.shape}")
    return TensorSpec(dst.dtype, dst.shape)


def _rule_cond(op, args, attrs, ctx) -> TensorSpec:
    raise ShapeError("core.cond is inferred structurally by the shape pass, not via the rule table")


def _qparams_ok(op: str, qp: TensorSpec, tokens: Dim) -> None:
    if qp.dtype is not DType.F32 or qp.rank != 2 or qp.shape[1] != 2 or not dims_match(qp.shape[0], tokens):
        raise ShapeError(f"{op}: per-token qparams must be F32 [{tokens}, 2], got {qp.dtype.value}{qp.shape}")


def _rule_quantize_per_tensor(op, args, attrs, ctx) -> TensorSpec:
    x = _tensor(args, 0, op)
    _expect_dtype(op, x, {DType.F32}, "input")
    if len(args) == 2:
        # dynamic per-token form: (x [T, K], qparams [T, 2])
        if x.rank != 2:
            raise ShapeError(f"{op}: per-token form needs a rank-2 input, got rank {x.rank}")
        _qparams_ok(op, _tensor(args, 1, op), x.shape[0])
    elif len(args) == 3:
        if is_tensor(args[1]) or is_tensor(args[2]):
            raise ShapeError(f"{op}: static form takes scalar scale and zero_point")
    else:
        raise ArityError(f"{op} takes (x, qparams) or (x, scale, zero_point)")
    return TensorSpec(DType.I8, x.shape)


def _rule_dequantize_per_tensor(op, args, attrs, ctx) -> TensorSpec:
    q = _tensor(args, 0, op)
    _expect_dtype(op, q, {DType.I8}, "input")
    if len(args) == 2 and is_tensor(args[1]):
        # per-channel form: scales tensor along attr axis
        scales = _tensor(args, 1, op)
        axis = _normalize_axis(_int_attr(attrs, "axis", op, default=0), q.rank, op)
        if scales.dtype is not DType.F32 or scales.rank != 1 or not dims_match(scales.shape[0], q.shape[axis]):
            raise ShapeError(f"{op}: scales must be F32 [{q.shape[axis]}], got {scales.dtype.value}{scales.shape}")
    elif len(args) == 3:
        if is_tensor(args[1]) or is_tensor(args[2]):
            raise ShapeError(f"{op}: per-tensor form takes scalar scale and zero_point")
    else:
        raise ArityError(f"{op} takes (q, scales) or (q, scale, zero_point)")
    return TensorSpec(DType.F32, q.shape)


def _rule_choose_qparams_per_token(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 1)
    x = _tensor(args, 0, op)
    _expect_dtype(op, x, {DType.F32}, "input")
    if x.rank != 2:
        raise ShapeError(f"{op}: expects a rank-2 [tokens, features] input, got rank {x.rank}")
    return TensorSpec(DType.F32, (x.shape[0], 2))


def _rule_linear_8w(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 5, 6)
    xq = _tensor(args, 0, op)
    _expect_dtype(op, xq, {DType.I8}, "activations")
    if is_tensor(args[1]) or is_tensor(args[2]):
        raise ShapeError(f"{op}: activation scale and zero_point must be scalars")
    wq = _tensor(args, 3, op)
    ws = _tensor(args, 4, op)
    _expect_dtype(op, wq, {DType.I8}, "weights")
    _expect_dtype(op, ws, {DType.F32}, "weight scales")
    if xq.rank != 2 or wq.rank != 2 or not dims_match(xq.shape[1], wq.shape[1]):
        raise ShapeError(f"{op}: activations [T, K] and weights [N, K] disagree "
                         f"({xq.shape} vs {wq.shape})")
    if ws.rank != 1 or not dims_match(ws.shape[0], wq.shape[0]):
        raise ShapeError(f"{op}: weight scales must be [N]")
    if len(args) == 6:
        b = _tensor(args, 5, op)
        if b.dtype is not DType.F32 or b.rank != 1 or not dims_match(b.shape[0], wq.shape[0]):
            raise ShapeError(f"{op}: bias must be F32 [N]")
    return TensorSpec(DType.F32, (xq.shape[0], wq.shape[0]))


def _rule_linear_4w(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 4, 5)
    xq = _tensor(args, 0, op)
    qp = _tensor(args, 1, op)
    wp = _tensor(args, 2, op)
    ws = _tensor(args, 3, op)
    _expect_dtype(op, xq, {DType.I8}, "activations")
    _expect_dtype(op, wp, {DType.PACKED_U4}, "packed weights")
    _expect_dtype(op, ws, {DType.F32}, "group scales")
    if xq.rank != 2:
        raise ShapeError(f"{op}: activations must be [T, K]")
    _qparams_ok(op, qp, xq.shape[0])
    gs = _int_attr(attrs, "group_size", op)
    if wp.rank != 2 or not dims_match(xq.shape[1], wp.shape[1]):
        raise ShapeError(f"{op}: packed weights must be [N, K] with K matching activations")
    k = wp.shape[1]
    if not isinstance(k, int) or gs <= 0 or k % gs != 0:
        raise ShapeError(f"{op}: K={k} not divisible by group_size={gs}")
    if ws.rank != 2 or not dims_match(ws.shape[0], wp.shape[0]) or ws.shape[1] != k // gs:
        raise ShapeError(f"{op}: group scales must be [N, K/group_size]")
    if len(args) == 5:
        b = _tensor(args, 4, op)
        if b.dtype is not DType.F32 or b.rank != 1 or not dims_match(b.shape[0], wp.shape[0]):
            raise ShapeError(f"{op}: bias must be F32 [N]")
    return TensorSpec(DType.F32, (xq.shape[0], wp.shape[0]))


def _rule_sdpa(op, args, attrs, ctx) -> TensorSpec:
    quantized = bool(attrs.get("quantize_cache", False))
    _expect_arity(op, args, 8 if quantized else 6)
    q = _tensor(args, 0, op)
    k_new = _tensor(args, 1, op)
    v_new = _tensor(args, 2, op)
    kc = _tensor(args, 3, op)
    vc = _tensor(args, 4, op)
    pos = _tensor(args, 5, op)
    for name, t in (("query", q), ("new keys", k_new), ("new values", v_new)):
        _expect_dtype(op, t, {DType.F32}, name)
    cache_dtype = DType.I8 if quantized else DType.F32
    for name, t in (("key cache", kc), ("value cache", vc)):
        _expect_dtype(op, t, {cache_dtype}, name)
    _expect_dtype(op, pos, {DType.I64}, "position array")
    if q.rank not in (2, 3) or k_new.rank != q.rank or v_new.rank != q.rank:
        raise ShapeError(f"{op}: q/k/v must all be [S, D] or [H, S, D]")
    if kc.rank != q.rank or vc.rank != q.rank:
        raise ShapeError(f"{op}: cache rank must match query rank")
    head = q.shape[:-2] if q.rank == 3 else ()
    d = q.shape[-1]
    for t in (k_new, v_new, kc, vc):
        if not dims_match(t.shape[-1], d) or t.shape[:-2] != head:
            raise ShapeError(f"{op}: head/feature dims disagree ({t.shape} vs {q.shape})")
    if not dims_match(k_new.shape[-2], q.shape[-2]) or not dims_match(v_new.shape[-2], q.shape[-2]):
        raise ShapeError(f"{op}: q, new keys, and new values must cover the same step length")
    cap = kc.shape[-2]
    if not isinstance(cap, int):
        raise ShapeError(f"{op}: cache capacity must be concrete")
    if not dims_match(vc.shape[-2], cap):
        raise ShapeError(f"{op}: K and V caches must share capacity")
    if pos.rank != 1 or pos.shape[0] != cap:
        raise ShapeError(f"{op}: position array must be I64 [{cap}]")
    window = attrs.get("window", 0)
    if not isinstance(window, int) or window < 0 or window > cap:
        raise ShapeError(f"{op}: window must be an int in [0, capacity={cap}], got {window!r}")
    if ctx.dim_upper(q.shape[-2]) > cap and window == 0:
        raise ShapeError(f"{op}: step length bound {ctx.dim_upper(q.shape[-2])} exceeds cache capacity {cap}")
    if quantized:
        for i, name in ((6, "key cache qparams"), (7, "value cache qparams")):
            qp = _tensor(args, i, op)
            if qp.dtype is not DType.F32 or qp.shape != (cap, 2):
                raise ShapeError(f"{op}: {name} must be F32 [{cap}, 2]")
    return TensorSpec(DType.F32, q.shape)


def _rule_rms_norm(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 2)
    x = _tensor(args, 0, op)
    w = _tensor(args, 1, op)
    _expect_dtype(op, x, {DType.F32}, "input")
    if w.rank != 1 or not dims_match(w.shape[0], x.shape[-1]):
        raise ShapeError(f"{op}: weight must be [{x.shape[-1]}]")
    return TensorSpec(DType.F32, x.shape)


def _rule_linear_bias(op, args, attrs, ctx) -> TensorSpec:
    _expect_arity(op, args, 3)
    return _rule_linear(op, args, attrs, ctx)


Rule = Callable[[str, Sequence[Arg], Mapping[str, Any], RuleContext], TensorSpec]

OP_RULES: dict[str, Rule] = {
    "core.add": _binary_elementwise,
    "core.sub": _binary_elementwise,
    "core.mul": _binary_elementwise,
    "core.div": _binary_float,
    "core.neg": _unary_float,
    "core.exp": _unary_float,
    "core.rsqrt": _unary_float,
    "core.relu": _unary_float,
    "core.sigmoid": _unary_float,
    "core.matmul": _rule_matmul,
    "core.linear": _rule_linear,
    "core.softmax": _rule_softmax,
    "core.permute_copy": _rule_permute_copy,
    "core.slice_copy": _rule_slice_copy,
    "core.cat": _rule_cat,
    "core.embedding": _rule_embedding,
    "core.mean_dim": _rule_mean_dim,
    "core.copy_": _rule_copy_,
    "core.cond": _rule_cond,
    "q.quantize_per_tensor": _rule_quantize_per_tensor,
    "q.dequantize_per_tensor": _rule_dequantize_per_tensor,
    "q.choose_qparams_per_token": _rule_choose_qparams_per_token,
    "q.linear_8w": _rule_linear_8w,
    "q.linear_4w": _rule_linear_4w,
    "custom.sdpa_with_kv_cache": _rule_sdpa,
    "hl.rms_norm": _rule_rms_norm,
    "hl.silu": _unary_float,
    "hl.linear_bias": _rule_linear_bias,
}

assert CORE_OPS <= set(OP_RULES) and HL_OPS <= set(OP_RULES)


def infer_node_spec(op: str, args: Sequence[Arg], attrs: Mapping[str, Any],
                    ctx: RuleContext) -> TensorSpec:
    if op not in OP_RULES:
        raise UnknownOp(f"unknown operator {op!r}")
    return OP_RULES[op](op, args, attrs, ctx)
