"""Model ingestion: declarative JSON graph files -> EXPORT-level graphs.

Schema (UTF-8 JSON): ``{name, symbol_bounds, methods: [{name, inputs:
[{name, dtype, shape}], outputs: [names], nodes: [{op, inputs, output,
attrs}]}], constants: {name: payload}, states: {name: payload}}`` where a
payload is the shared base64 tensor schema and shape entries are integers
or symbol strings. Control flow nodes carry two inline node lists under
``then`` / ``else``.

Shapes of all intermediates are inferred during parsing, so a graph that
parses is shape sound; cyclic or non-SSA files fail with SchemaError.
"""

from __future__ import annotations

import json
from typing import Any, Mapping

from ..errors import SchemaError
from ..tensors import decode_tensor, parse_dtype
from .builder import GraphBuilder, MethodBuilder
from .types import Argument, Dim, ExportGraph, Scalar, SymbolBound, TensorSpec

_ALLOWED_TOP = {"name", "symbol_bounds", "methods", "constants", "states"}


def parse_model(text: str) -> ExportGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("model file must be a JSON object")
    unknown = set(doc) - _ALLOWED_TOP
    if unknown:
        raise SchemaError(f"unknown top-level keys: {sorted(unknown)}")

    name = doc.get("name", "model")
    if not isinstance(name, str):
        raise SchemaError("model name must be a string")

    bounds = _parse_symbol_bounds(doc.get("symbol_bounds", {}))
    gb = GraphBuilder(name, bounds)

    for cname, entry in _mapping(doc.get("constants", {}), "constants").items():
        dtype, shape, arr = decode_tensor(entry)
        gb.add_constant(_check_name(cname, "constant name"), arr, TensorSpec(dtype, shape))
    for sname, entry in _mapping(doc.get("states", {}), "states").items():
        dtype, shape, arr = decode_tensor(entry)
        gb.add_state(_check_name(sname, "state name"), arr, TensorSpec(dtype, shape))

    methods = doc.get("methods")
    if not isinstance(methods, list) or not methods:
        raise SchemaError("model must declare a non-empty methods list")
    for mdoc in methods:
        _parse_method(gb, _mapping(mdoc, "method"), bounds)

    return gb.build()


def parse_model_file(path: str) -> ExportGraph:
    with open(path, "r", encoding="utf-8") as f:
        return parse_model(f.read())


def _mapping(v: Any, what: str) -> dict:
    if not isinstance(v, dict):
        raise SchemaError(f"{what} must be a JSON object")
    return v


def _check_name(name: Any, what: str) -> str:
    if not isinstance(name, str) or not name:
        raise SchemaError(f"{what} must be a non-empty string")
    if name.startswith("%"):
        raise SchemaError(f"{what} {name!r}: names starting with '%' are reserved")
    return name


def _parse_symbol_bounds(doc: Any) -> dict[str, SymbolBound]:
    out: dict[str, SymbolBound] = {}
    for sym, b in _mapping(doc, "symbol_bounds").items():
        b = _mapping(b, f"bounds for symbol {sym!r}")
        if "min" not in b or "max" not in b:
            raise SchemaError(f"symbol {sym!r} must declare min and max bounds")
        out[sym] = SymbolBound(int(b["min"]), int(b["max"]))
    return out


def _parse_shape(shape: Any, bounds: Mapping[str, SymbolBound]) -> tuple[Dim, ...]:
    if not isinstance(shape, list):
        raise SchemaError(f"shape must be a list, got {shape!r}")
    dims: list[Dim] = []
    for d in shape:
        if isinstance(d, bool):
            raise SchemaError(f"invalid shape entry {d!r}")
        if isinstance(d, int):
            if d < 0:
                raise SchemaError(f"negative dimension {d}")
            dims.append(d)
        elif isinstance(d, str):
            if d not in bounds:
                raise SchemaError(f"symbol {d!r} used without bounds; unbounded symbols are not allowed")
            dims.append(d)
        else:
            raise SchemaError(f"shape entries must be ints or symbol strings, got {d!r}")
    return tuple(dims)


def _parse_attrs(doc: Any) -> dict[str, Any]:
    attrs = _mapping(doc, "attrs")
    for k, v in attrs.items():
        if isinstance(v, (int, float, bool, str)):
            continue
        if isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v):
            continue  # axis permutations
        raise SchemaError(f"attr {k!r} must be a scalar or int list, got {v!r}")
    return dict(attrs)


def _parse_method(gb: GraphBuilder, mdoc: dict, bounds: Mapping[str, SymbolBound]) -> None:
    mname = mdoc.get("name")
    if not isinstance(mname, str) or not mname:
        raise SchemaError("method must have a name")
    mb = gb.method(mname)

    for idoc in mdoc.get("inputs", []):
        idoc = _mapping(idoc, "input")
        for key in ("name", "dtype", "shape"):
            if key not in idoc:
                raise SchemaError(f"method input missing {key!r}")
        spec = TensorSpec(parse_dtype(idoc["dtype"]), _parse_shape(idoc["shape"], bounds))
        mb.add_input(_check_name(idoc["name"], "input name"), spec)

    nodes = mdoc.get("nodes", [])
    if not isinstance(nodes, list):
        raise SchemaError("method nodes must be a list")
    for ndoc in nodes:
        _parse_node(mb, _mapping(ndoc, "node"))

    outputs = mdoc.get("outputs")
    if not isinstance(outputs, list) or not outputs:
        raise SchemaError(f"method {mname!r} must declare outputs")
    for oname in outputs:
        if not isinstance(oname, str):
            raise SchemaError("outputs must be value names")
        mb.mark_output(mb.resolve(oname))


def _parse_node(mb: MethodBuilder, ndoc: dict) -> None:
    op = ndoc.get("op")
    if not isinstance(op, str):
        raise SchemaError("node missing op name")
    out_name = _check_name(ndoc.get("output"), f"{op}: node output name")
    attrs = _parse_attrs(ndoc.get("attrs", {}))
    raw_inputs = ndoc.get("inputs", [])
    if not isinstance(raw_inputs, list):
        raise SchemaError(f"{op}: inputs must be a list")

    if op == "core.cond":
        _parse_cond(mb, ndoc, raw_inputs, out_name)
        return

    inputs = [_resolve_arg(mb, a, op) for a in raw_inputs]
    if op == "core.copy_":
        if len(inputs) != 1 or not isinstance(inputs[0], int):
            raise SchemaError("core.copy_ takes exactly one source value")
        mb.add_copy_(inputs[0], mb.resolve(out_name))
        return
    mb.add_node(op, inputs, attrs, out_name=out_name)


def _parse_cond(mb: MethodBuilder, ndoc: dict, raw_inputs: list, out_name: str) -> None:
    if len(raw_inputs) != 1:
        raise SchemaError("core.cond takes exactly one predicate input")
    pred = _resolve_arg(mb, raw_inputs[0], "core.cond")
    if not isinstance(pred, int):
        raise SchemaError("core.cond predicate must be a value, not a literal")
    then_doc = ndoc.get("then")
    else_doc = ndoc.get("else")
    if not isinstance(then_doc, list) or not isinstance(else_doc, list):
        raise SchemaError("core.cond requires 'then' and 'else' node lists")

    def branch(nodes_doc: list):
        def build(b: MethodBuilder) -> int:
            last = -1
            for ndoc2 in nodes_doc:
                ndoc2 = _mapping(ndoc2, "node")
                _parse_node(b, ndoc2)
                last = b.resolve(ndoc2["output"])
            return last
        return build

    mb.add_cond(pred, branch(then_doc), branch(else_doc), out_name=out_name)


def _resolve_arg(mb: MethodBuilder, a: Any, op: str) -> Argument:
    if isinstance(a, str):
        return mb.resolve(a)
    if isinstance(a, bool) or isinstance(a, (int, float)):
        return Scalar(a)
    raise SchemaError(f"{op}: node inputs must be value names or scalar literals, got {a!r}")
