"""Reference eager interpreter.

Executes graphs at either dialect level directly over numpy, computing each
float op in float64 (with float32 value storage) and integer ops in int64.
This is the pre-deployment oracle: every downstream transformation --
decomposition, quantization, delegation, packaging, runtime execution -- is
tested for equivalence against this interpreter.

Deterministic, reentrant, and mutation-free: state tensors are copied on
entry and the updated copies are returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ArityError, ContextOverflow, EdgeRtError, ShapeMismatch
from ..tensors import DType, unpack_u4
from .types import ExportGraph, Method, NodeDef, Scalar, TensorSpec, ValueKind

_QPARAM_FLOOR = 1e-8


@dataclass
class EagerResult:
    outputs: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    # value id -> result array, populated when tapping is enabled
    taps: dict[int, np.ndarray] = field(default_factory=dict)


def eager_execute(g: ExportGraph, inputs: Mapping[str, np.ndarray],
                  state: Mapping[str, np.ndarray] | None = None,
                  method: str | None = None, tap: bool = False) -> EagerResult:
    """Interpret one method. ``state`` overrides the graph's initial state
    payloads; the returned state map reflects all in-place updates."""
    m = g.method(method)
    state_vals = {name: np.array(arr, copy=True) for name, arr in g.states.items()}
    if state is not None:
        for name, arr in state.items():
            if name not in state_vals:
                raise ShapeMismatch(f"unknown state {name!r}")
            state_vals[name] = np.array(arr, copy=True)

    env: dict[int, np.ndarray] = {}
    for v in m.values:
        if v.kind is ValueKind.CONSTANT:
            env[v.id] = g.constants[v.constant_ref]
        elif v.kind is ValueKind.STATE:
            env[v.id] = state_vals[v.constant_ref]
        elif v.kind is ValueKind.INPUT:
            if v.name not in inputs:
                raise ArityError(f"missing input {v.name!r}")
            arr = np.asarray(inputs[v.name])
            _check_input(v.name, arr, v.spec, g)
            env[v.id] = arr.astype(v.spec.dtype.np_dtype, copy=False)

    interp = _Interp(g, m, env, state_vals, tap)
    if tap:
        for vid, arr in env.items():
            interp.taps[vid] = np.array(arr, copy=True)
    interp.run(m.nodes)

    outputs = {m.value(o).name: np.array(env[o], copy=True) for o in m.outputs}
    return EagerResult(outputs, state_vals, interp.taps)


def _check_input(name: str, arr: np.ndarray, spec: TensorSpec, g: ExportGraph) -> None:
    if arr.ndim != spec.rank:
        raise ShapeMismatch(f"input {name!r}: rank {arr.ndim} != spec rank {spec.rank}")
    for i, d in enumerate(spec.shape):
        actual = arr.shape[i]
        if isinstance(d, int):
            if actual != d:
                raise ShapeMismatch(f"input {name!r}: dim {i} is {actual}, spec says {d}")
        else:
            b = g.symbol_bounds[d]
            if not b.min <= actual <= b.max:
                raise ShapeMismatch(f"input {name!r}: dim {i}={actual} outside {d} bounds [{b.min}, {b.max}]")


def _f(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


def _store_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


class _Interp:
    def __init__(self, g: ExportGraph, m: Method, env: dict[int, np.ndarray],
                 state_vals: dict[str, np.ndarray], tap: bool):
        self.g = g
        self.m = m
        self.env = env
        self.state_vals = state_vals
        self.tapping = tap
        self.taps: dict[int, np.ndarray] = {}

    def run(self, nodes) -> None:
        for node in nodes:
            self.eval_node(node)

    def arg(self, a):
        if isinstance(a, Scalar):
            return a.value
        return self.env[a]

    def eval_node(self, node: NodeDef) -> None:
        fn = _EVAL.get(node.op)
        if fn is None:
            raise EdgeRtError(f"eager interpreter has no rule for {node.op!r}")
        result = fn(self, node)
        if node.op == "core.copy_":
            # in-place state update: refresh the backing state payload
            v = self.m.value(node.output)
            self.env[node.output] = result
            if v.constant_ref is not None:
                self.state_vals[v.constant_ref] = result
        else:
            self.env[node.output] = result
        if self.tapping:
            self.taps[node.output] = np.array(self.env[node.output], copy=True)


def _binary(op):
    def run(it: _Interp, node: NodeDef) -> np.ndarray:
        a, b = (it.arg(x) for x in node.inputs)
        ta = a if isinstance(a, np.ndarray) else None
        tb = b if isinstance(b, np.ndarray) else None
        anchor = ta if ta is not None else tb
        if anchor.dtype == np.float32:
            av = _f(a) if ta is not None else float(a)
            bv = _f(b) if tb is not None else float(b)
            return _store_f32(op(av, bv))
        av = a.astype(np.int64) if ta is not None else int(a)
        bv = b.astype(np.int64) if tb is not None else int(b)
        return op(av, bv).astype(anchor.dtype)
    return run


def _unary(op):
    def run(it: _Interp, node: NodeDef) -> np.ndarray:
        x = _f(it.arg(node.inputs[0]))
        return _store_f32(op(x))
    return run


def _eval_matmul(it, node):
    a, b = (_f(it.arg(x)) for x in node.inputs)
    return _store_f32(a @ b)


def _eval_linear(it, node):
    x = _f(it.arg(node.inputs[0]))
    w = _f(it.arg(node.inputs[1]))
    y = x @ w.T
    if len(node.inputs) == 3:
        y = y + _f(it.arg(node.inputs[2]))
    return _store_f32(y)


def _eval_softmax(it, node):
    x = _f(it.arg(node.inputs[0]))
    axis = int(node.attrs.get("axis", -1))
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _store_f32(e / np.sum(e, axis=axis, keepdims=True))


def _eval_permute_copy(it, node):
    x = it.arg(node.inputs[0])
    return np.ascontiguousarray(np.transpose(x, node.attrs["perm"]))


def _eval_slice_copy(it, node):
    x = it.arg(node.inputs[0])
    axis = int(node.attrs.get("axis", 0)) % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(int(node.attrs["start"]), int(node.attrs["end"]))
    return np.ascontiguousarray(x[tuple(sl)])


def _eval_cat(it, node):
    parts = [it.arg(a) for a in node.inputs]
    return np.concatenate(parts, axis=int(node.attrs.get("axis", 0)))


def _eval_embedding(it, node):
    table = it.arg(node.inputs[0])
    idx = it.arg(node.inputs[1])
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeMismatch(f"embedding index out of range [0, {table.shape[0]})")
    return np.ascontiguousarray(table[idx])


def _eval_mean_dim(it, node):
    x = _f(it.arg(node.inputs[0]))
    axis = int(node.attrs.get("axis", -1))
    return _store_f32(np.mean(x, axis=axis, keepdims=bool(node.attrs.get("keepdim", False))))


def _eval_cond(it, node):
    pred = it.arg(node.inputs[0])
    taken = node.branches[0] if bool(pred.reshape(-1)[0]) else node.branches[1]
    it.run(taken)
    return np.array(it.env[taken[-1].output], copy=True)


def _eval_copy_(it, node):
    src = it.arg(node.inputs[0])
    return np.array(src, copy=True)


def _round_half_even(x):
    return np.rint(x)


def _affine_q(x, scale, zp, qmin, qmax):
    q = _round_half_even(x / scale) + zp
    return np.clip(q, qmin, qmax)


def _eval_quantize_per_tensor(it, node):
    x = _f(it.arg(node.inputs[0]))
    qmin = int(node.attrs.get("qmin", -127))
    qmax = int(node.attrs.get("qmax", 127))
    if len(node.inputs) == 2:
        qp = _f(it.arg(node.inputs[1]))
        scale = qp[:, 0:1]
        zp = qp[:, 1:2]
        return _affine_q(x, scale, zp, qmin, qmax).astype(np.int8)
    scale = float(it.arg(node.inputs[1]))
    zp = int(it.arg(node.inputs[2]))
    return _affine_q(x, scale, zp, qmin, qmax).astype(np.int8)


def _eval_dequantize_per_tensor(it, node):
    q = it.arg(node.inputs[0]).astype(np.float64)
    if len(node.inputs) == 2:
        scales = _f(it.arg(node.inputs[1]))
        axis = int(node.attrs.get("axis", 0)) % q.ndim
        shape = [1] * q.ndim
        shape[axis] = -1
        return _store_f32(q * scales.reshape(shape))
    scale = float(it.arg(node.inputs[1]))
    zp = int(it.arg(node.inputs[2]))
    return _store_f32((q - zp) * scale)


def choose_qparams_rows(x: np.ndarray, qmin: int = -128, qmax: int = 127) -> np.ndarray:
    """Per-row asymmetric qparams, range widened to include zero.

    Returns [rows, 2] float32: column 0 scale, column 1 zero point.
    """
    x = np.asarray(x, dtype=np.float64)
    mn = np.minimum(x.min(axis=-1), 0.0)
    mx = np.maximum(x.max(axis=-1), 0.0)
    scale = (mx - mn) / (qmax - qmin)
    scale = np.where(scale < _QPARAM_FLOOR, _QPARAM_FLOOR, scale)
    zp = np.clip(qmin - _round_half_even(mn / scale), qmin, qmax)
    return np.stack([scale, zp], axis=-1).astype(np.float32)


def _eval_choose_qparams_per_token(it, node):
    x = _f(it.arg(node.inputs[0]))
    qmin = int(node.attrs.get("qmin", -128))
    qmax = int(node.attrs.get("qmax", 127))
    return choose_qparams_rows(x, qmin, qmax)


def _eval_linear_8w(it, node):
    xq = it.arg(node.inputs[0]).astype(np.int64)
    xs = float(it.arg(node.inputs[1]))
    xzp = int(it.arg(node.inputs[2]))
    wq = it.arg(node.inputs[3]).astype(np.int64)
    ws = _f(it.arg(node.inputs[4]))
    acc = xq @ wq.T
    wsum = wq.sum(axis=1)
    y = (acc - xzp * wsum[None, :]).astype(np.float64) * (xs * ws)[None, :]
    if len(node.inputs) == 6:
        y = y + _f(it.arg(node.inputs[5]))
    return _store_f32(y)


def unpack_w4_codes(packed: np.ndarray, n: int) -> np.ndarray:
    """Unpack 4-bit weight codes: stored offset-by-8 nibbles -> int8 in
    [-8, 7]."""
    return (unpack_u4(packed, n).astype(np.int16) - 8).astype(np.int8)


def _eval_linear_4w(it, node):
    xq = it.arg(node.inputs[0]).astype(np.int64)
    qp = _f(it.arg(node.inputs[1]))
    packed = it.arg(node.inputs[2])
    ws = _f(it.arg(node.inputs[3]))
    gs = int(node.attrs["group_size"])
    n_out, n_groups = ws.shape
    k = n_groups * gs
    wq = unpack_w4_codes(packed, n_out * k).astype(np.int64).reshape(n_out, k)
    t = xq.shape[0]
    xg = xq.reshape(t, n_groups, gs)
    wg = wq.reshape(n_out, n_groups, gs)
    acc = np.einsum("tgk,ngk->tng", xg, wg)
    wsum = wg.sum(axis=2)
    zp = qp[:, 1].astype(np.int64)
    centered = acc - zp[:, None, None] * wsum[None, :, :]
    y = (centered.astype(np.float64) * ws[None, :, :]).sum(axis=2) * qp[:, 0][:, None]
    if len(node.inputs) == 5:
        y = y + _f(it.arg(node.inputs[4]))
    return _store_f32(y)


def _eval_sdpa(it, node):
    quantized = bool(node.attrs.get("quantize_cache", False))
    window = int(node.attrs.get("window", 0))
    q = _f(it.arg(node.inputs[0]))
    k_new = _f(it.arg(node.inputs[1]))
    v_new = _f(it.arg(node.inputs[2]))
    k_cache = it.arg(node.inputs[3])
    v_cache = it.arg(node.inputs[4])
    pos = it.arg(node.inputs[5])
    k_qp = it.arg(node.inputs[6]) if quantized else None
    v_qp = it.arg(node.inputs[7]) if quantized else None

    squeeze = q.ndim == 2
    if squeeze:
        q, k_new, v_new = q[None], k_new[None], v_new[None]
        k_cache, v_cache = k_cache[None], v_cache[None]

    out = np.empty_like(q)
    capacity = k_cache.shape[1]
    n_step = q.shape[1]
    count = int(pos.max()) + 1
    if window == 0 and count + n_step > capacity:
        raise ContextOverflow(f"cache holds {count} of {capacity}; cannot append {n_step}")

    for s in range(n_step):
        p = count + s
        slot = p % capacity if window else p
        pos[slot] = p
        for h in range(q.shape[0]):
            if quantized:
                qp = choose_qparams_rows(k_new[h, s][None, :])[0]
                k_cache[h, slot] = _affine_q(k_new[h, s], float(qp[0]), float(qp[1]), -128, 127).astype(np.int8)
                k_qp[slot] = qp
                qp = choose_qparams_rows(v_new[h, s][None, :])[0]
                v_cache[h, slot] = _affine_q(v_new[h, s], float(qp[0]), float(qp[1]), -128, 127).astype(np.int8)
                v_qp[slot] = qp
            else:
                k_cache[h, slot] = k_new[h, s].astype(k_cache.dtype)
                v_cache[h, slot] = v_new[h, s].astype(v_cache.dtype)

    scale = 1.0 / np.sqrt(q.shape[-1])
    for h in range(q.shape[0]):
        if quantized:
            keys = (k_cache[h].astype(np.float64) - k_qp[:, 1][:, None]) * k_qp[:, 0][:, None]
            vals = (v_cache[h].astype(np.float64) - v_qp[:, 1][:, None]) * v_qp[:, 0][:, None]
        else:
            keys = _f(k_cache[h])
            vals = _f(v_cache[h])
        for s in range(n_step):
            p = count + s
            visible = (pos >= 0) & (pos <= p)
            if window:
                visible &= pos > p - window
            scores = (keys[visible] @ q[h, s]) * scale
            scores = scores - scores.max()
            weights = np.exp(scores)
            weights = weights / weights.sum()
            out[h, s] = weights @ vals[visible]

    result = _store_f32(out[0] if squeeze else out)
    return result


_EVAL = {
    "core.add": _binary(lambda a, b: a + b),
    "core.sub": _binary(lambda a, b: a - b),
    "core.mul": _binary(lambda a, b: a * b),
    "core.div": _binary(lambda a, b: a / b),
    "core.neg": _unary(lambda x: -x),
    "core.exp": _unary(np.exp),
    "core.rsqrt": _unary(lambda x: 1.0 / np.sqrt(x)),
    "core.relu": _unary(lambda x: np.maximum(x, 0.0)),
    "core.sigmoid": _unary(lambda x: 1.0 / (1.0 + np.exp(-x))),
    "core.matmul": _eval_matmul,
    "core.linear": _eval_linear,
    "core.softmax": _eval_softmax,
    "core.permute_copy": _eval_permute_copy,
    "core.slice_copy": _eval_slice_copy,
    "core.cat": _eval_cat,
    "core.embedding": _eval_embedding,
    "core.mean_dim": _eval_mean_dim,
    "core.cond": _eval_cond,
    "core.copy_": _eval_copy_,
    "q.quantize_per_tensor": _eval_quantize_per_tensor,
    "q.dequantize_per_tensor": _eval_dequantize_per_tensor,
    "q.choose_qparams_per_token": _eval_choose_qparams_per_token,
    "q.linear_8w": _eval_linear_8w,
    "q.linear_4w": _eval_linear_4w,
    "custom.sdpa_with_kv_cache": _eval_sdpa,
    "hl.rms_norm": None,  # filled below
    "hl.silu": None,
    "hl.linear_bias": None,
}


def _eval_rms_norm(it, node):
    x = _f(it.arg(node.inputs[0]))
    w = _f(it.arg(node.inputs[1]))
    eps = float(node.attrs.get("eps", 1e-6))
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return _store_f32(x / np.sqrt(ms + eps) * w)


def _eval_silu(it, node):
    x = _f(it.arg(node.inputs[0]))
    return _store_f32(x / (1.0 + np.exp(-x)))


def _eval_linear_bias(it, node):
    return _eval_linear(it, node)


_EVAL["hl.rms_norm"] = _eval_rms_norm
_EVAL["hl.silu"] = _eval_silu
_EVAL["hl.linear_bias"] = _eval_linear_bias
