"""Annotation-driven quantization over EXPORT graphs.

The static int8 flow follows the classic three-step shape: a pattern
matcher annotates linear-like nodes with quantization intent, a calibration
run observes value ranges through the eager interpreter, and convert
rewrites the graph into reference quantize/dequantize form with per-channel
int8 weights.

The dynamic int4 flow needs no calibration: convert rewrites each matched
linear into choose-qparams -> per-token quantize -> grouped 4-bit linear,
with weights packed ahead of time.

Both run before edge lowering so the matcher still sees fused high-level
linear ops, and both produce graphs that lower cleanly through to_edge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import EmptyCalibrationSet, MissingStats, SchemaError
from ..graph.builder import MethodBuilder
from ..graph.passes import copy_node, preserved_name, rebuild_graph, remap_arg
from ..graph.types import DialectLevel, ExportGraph, Method, NodeDef, Scalar, ValueKind
from ..tensors import DType
from .affine import (
    DYN_I8_ACT,
    STATIC_I8_ACT,
    STATIC_I8_WEIGHT,
    QuantSpec,
    group_w4_spec,
    quantize_weight_groupwise,
    quantize_weight_per_channel,
    symmetric_scale,
)

_MATCHED_OPS = ("hl.linear_bias", "core.linear", "core.matmul")
_RECIPES = ("static_i8", "dyn_act_i8_w4")
_GROUP_SIZES = (32, 128)


@dataclass(frozen=True)
class Recipe:
    name: str
    group_size: int = 32

    def __post_init__(self):
        if self.name not in _RECIPES:
            raise SchemaError(f"recipe must be one of {_RECIPES}, got {self.name!r}")
        if self.group_size not in _GROUP_SIZES:
            raise SchemaError(f"group_size must be one of {_GROUP_SIZES}, got {self.group_size}")


def parse_recipe(text: str) -> Recipe:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"recipe file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "recipe" not in doc:
        raise SchemaError("recipe file must be an object with a 'recipe' field")
    unknown = set(doc) - {"recipe", "group_size"}
    if unknown:
        raise SchemaError(f"unknown recipe fields: {sorted(unknown)}")
    return Recipe(doc["recipe"], int(doc.get("group_size", 32)))


# node identity inside an annotation: (method name, index into method.nodes)
NodeKey = tuple[str, int]


@dataclass(frozen=True)
class NodeAnnotation:
    input_qspecs: Mapping[int, QuantSpec]
    output_qspec: QuantSpec | None


@dataclass
class Annotation:
    recipe: Recipe
    entries: dict[NodeKey, NodeAnnotation] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def _weight_axis(op: str) -> int:
    # linear weights are [out, in]; matmul weights are [in, out]
    return 0 if op in ("core.linear", "hl.linear_bias") else 1


def _matchable(m: Method, node: NodeDef) -> bool:
    if node.op not in _MATCHED_OPS:
        return False
    args = list(node.inputs)
    if len(args) < 2 or isinstance(args[0], Scalar) or isinstance(args[1], Scalar):
        return False
    x = m.value(args[0])
    w = m.value(args[1])
    if w.kind is not ValueKind.CONSTANT:
        return False  # only constant weights can be repacked ahead of time
    if x.spec.rank != 2 or x.spec.dtype is not DType.F32 or w.spec.dtype is not DType.F32:
        return False
    return True


def annotate(g: ExportGraph, recipe: Recipe) -> Annotation:
    """Tag every linear-like node with constant rank-2 weights. Unmatched
    nodes are left untouched; an empty annotation is valid."""
    if g.dialect_level is not DialectLevel.EXPORT:
        raise SchemaError("annotate runs on EXPORT graphs, before edge lowering")
    ann = Annotation(recipe)
    for mname, m in g.methods.items():
        for idx, node in enumerate(m.nodes):
            if not _matchable(m, node):
                continue
            if recipe.name == "static_i8":
                ann.entries[(mname, idx)] = NodeAnnotation(
                    input_qspecs={0: STATIC_I8_ACT,
                                  1: _per_channel_for(node.op)},
                    output_qspec=STATIC_I8_ACT,
                )
            else:
                ann.entries[(mname, idx)] = NodeAnnotation(
                    input_qspecs={0: DYN_I8_ACT,
                                  1: group_w4_spec(recipe.group_size)},
                    output_qspec=None,
                )
    return ann


def _per_channel_for(op: str) -> QuantSpec:
    axis = _weight_axis(op)
    if axis == 0:
        return STATIC_I8_WEIGHT
    return QuantSpec(DType.I8, "per_channel", axis=axis, symmetric=True, qmin=-127, qmax=127)


# observer keys: ("in", operand) or ("out",) per annotated node
EdgeKey = tuple[NodeKey, tuple]


@dataclass
class ObserverStats:
    ranges: dict[EdgeKey, tuple[float, float]] = field(default_factory=dict)

    def update(self, key: EdgeKey, lo: float, hi: float) -> None:
        if key in self.ranges:
            plo, phi = self.ranges[key]
            lo, hi = min(plo, lo), max(phi, hi)
        self.ranges[key] = (lo, hi)

    def merge(self, other: "ObserverStats") -> "ObserverStats":
        merged = ObserverStats(dict(self.ranges))
        for key, (lo, hi) in other.ranges.items():
            merged.update(key, lo, hi)
        return merged


def calibrate(g: ExportGraph, annotation: Annotation,
              sample_inputs: Sequence[Mapping[str, np.ndarray]]) -> ObserverStats:
    """Min/max observation over eager runs of each calibration batch.

    Only static annotations observe anything; dynamic activation specs are
    resolved at runtime per token.
    """
    from ..graph.eager import eager_execute

    static_keys = [k for k, na in annotation.entries.items()
                   if any(not qs.dynamic for qs in na.input_qspecs.values()) or na.output_qspec]
    if annotation.recipe.name == "static_i8" and static_keys and not sample_inputs:
        raise EmptyCalibrationSet("static quantization requires calibration batches")

    stats = ObserverStats()
    by_method: dict[str, list[NodeKey]] = {}
    for key in annotation.entries:
        by_method.setdefault(key[0], []).append(key)

    for batch in sample_inputs:
        for mname, keys in by_method.items():
            m = g.methods[mname]
            result = eager_execute(g, batch, method=mname, tap=True)
            for key in keys:
                node = m.nodes[key[1]]
                na = annotation.entries[key]
                for operand, qspec in na.input_qspecs.items():
                    if qspec.dynamic or qspec.scheme != "per_tensor":
                        continue  # weights are quantized from the payload directly
                    vid = node.inputs[operand]
                    arr = result.taps[vid]
                    stats.update((key, ("in", operand)), float(arr.min()), float(arr.max()))
                if na.output_qspec is not None:
                    arr = result.taps[node.output]
                    stats.update((key, ("out",)), float(arr.min()), float(arr.max()))
    return stats


def convert(g: ExportGraph, annotation: Annotation,
            stats: ObserverStats | None = None) -> ExportGraph:
    """Materialize the annotation: insert quantize/dequantize chains for the
    static flow, rewrite to grouped 4-bit linears for the dynamic flow, and
    swap weight constants for quantized payloads."""
    stats = stats or ObserverStats()

    def transform(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method) -> int:
        key = (m.name, _node_index(m, node))
        na = annotation.entries.get(key)
        if na is None:
            return copy_node(mb, node, remap, m)
        if annotation.recipe.name == "static_i8":
            return _convert_static(mb, node, remap, m, key, na, stats)
        return _convert_dynamic(mb, node, remap, m, annotation.recipe)

    return rebuild_graph(g, transform)


def _node_index(m: Method, node: NodeDef) -> int:
    for i, n in enumerate(m.nodes):
        if n is node:
            return i
    return -1


def _static_scale(stats: ObserverStats, key: EdgeKey, what: str) -> float:
    if key not in stats.ranges:
        raise MissingStats(f"no observer stats for {what} of node {key[0]}")
    lo, hi = stats.ranges[key]
    return symmetric_scale(lo, hi, 127)


def _quantized_weight_consts(mb: MethodBuilder, m: Method, node: NodeDef,
                             qspec: QuantSpec) -> tuple[int, ...]:
    """Quantize the node's constant weight and register payload constants,
    reusing entries when several nodes share one weight."""
    gb = mb.graph
    wname = m.value(node.inputs[1]).constant_ref
    payload = gb.constants[wname]
    if qspec.scheme == "per_channel":
        qt = quantize_weight_per_channel(payload, axis=qspec.axis)
        qname, sname = f"{wname}.q8", f"{wname}.q8_scales"
        if qname not in gb.constants:
            gb.add_constant(qname, qt.qdata)
            gb.add_constant(sname, qt.scales)
        return mb.ref_constant(qname), mb.ref_constant(sname)
    # per_group int4: matmul weights arrive [in, out] and are transposed to
    # the [out, in] layout the grouped kernel expects
    w = payload.T if _weight_axis(node.op) == 1 else payload
    qt = quantize_weight_groupwise(np.ascontiguousarray(w), 4, qspec.group_size)
    qname, sname = f"{wname}.q4", f"{wname}.q4_scales"
    if qname not in gb.constants:
        from ..graph.types import TensorSpec
        gb.add_constant(qname, qt.qdata, TensorSpec(DType.PACKED_U4, qt.original_shape))
        gb.add_constant(sname, qt.scales)
    return mb.ref_constant(qname), mb.ref_constant(sname)


def _convert_static(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method,
                    key: NodeKey, na: NodeAnnotation, stats: ObserverStats) -> int:
    h = node.debug_handle
    x = remap_arg(node.inputs[0], remap)
    in_scale = _static_scale(stats, (key, ("in", 0)), "input")
    xq = mb.add_node("q.quantize_per_tensor", [x, Scalar(in_scale), Scalar(0)],
                     {"qmin": -127, "qmax": 127}, debug_handle=h)
    xdq = mb.add_node("q.dequantize_per_tensor", [xq, Scalar(in_scale), Scalar(0)], debug_handle=h)

    wspec = na.input_qspecs[1]
    wq, wscales = _quantized_weight_consts(mb, m, node, wspec)
    wdq = mb.add_node("q.dequantize_per_tensor", [wq, wscales], {"axis": wspec.axis}, debug_handle=h)

    op = "core.linear" if node.op == "hl.linear_bias" else node.op
    rest = [remap_arg(a, remap) for a in node.inputs[2:]]
    y = mb.add_node(op, [xdq, wdq, *rest], node.attrs if node.op == "core.matmul" else {},
                    debug_handle=h)

    out_scale = _static_scale(stats, (key, ("out",)), "output")
    yq = mb.add_node("q.quantize_per_tensor", [y, Scalar(out_scale), Scalar(0)],
                     {"qmin": -127, "qmax": 127}, debug_handle=h)
    return mb.add_node("q.dequantize_per_tensor", [yq, Scalar(out_scale), Scalar(0)],
                       out_name=preserved_name(m, node.output), debug_handle=h)


def _convert_dynamic(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method,
                     recipe: Recipe) -> int:
    h = node.debug_handle
    x = remap_arg(node.inputs[0], remap)
    qp = mb.add_node("q.choose_qparams_per_token", [x], {"qmin": -128, "qmax": 127}, debug_handle=h)
    xq = mb.add_node("q.quantize_per_tensor", [x, qp], {"qmin": -128, "qmax": 127}, debug_handle=h)
    wq, wscales = _quantized_weight_consts(mb, m, node, group_w4_spec(recipe.group_size))
    bias = [remap_arg(a, remap) for a in node.inputs[2:]]
    return mb.add_node("q.linear_4w", [xq, qp, wq, wscales, *bias],
                       {"group_size": recipe.group_size},
                       out_name=preserved_name(m, node.output), debug_handle=h)
