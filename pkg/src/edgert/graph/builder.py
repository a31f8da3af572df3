"""Programmatic graph construction with inline shape inference.

Every node added through the builder has its output spec computed from the
op rule table at insertion time, so any graph that finishes building is
shape sound and SSA by construction. The parser, the lowering passes, and
the quantizer all construct methods through this interface.
"""

from __future__ import annotations

from typing import Any, Callable, Mapping

import numpy as np

from ..errors import SchemaError, ShapeError
from ..tensors import DType, dtype_of_array
from .ops import Arg, RuleContext, infer_node_spec
from .types import (
    Argument,
    DialectLevel,
    ExportGraph,
    Method,
    NodeDef,
    Scalar,
    SymbolBound,
    TensorSpec,
    ValueDef,
    ValueKind,
    topological_check,
)


class MethodBuilder:
    def __init__(self, name: str, graph: "GraphBuilder"):
        self.name = name
        self.graph = graph
        self._values: list[ValueDef] = []
        self._scopes: list[dict[str, int]] = [{}]
        self._nodes: list[NodeDef] = []
        self._branch_stack: list[list[NodeDef]] = []
        self._inputs: list[int] = []
        self._outputs: list[int] = []
        self._next_handle = 0
        self._ctx = RuleContext(graph.symbol_bounds)

    # -- value management ---------------------------------------------------

    def _define(self, name: str, spec: TensorSpec, kind: ValueKind,
                constant_ref: str | None = None, debug_handle: int = -1) -> int:
        for scope in self._scopes:
            if name in scope:
                raise SchemaError(f"method {self.name!r}: value {name!r} defined twice (SSA violation)")
        vid = len(self._values)
        self._values.append(ValueDef(vid, name, spec, kind, constant_ref, debug_handle))
        self._scopes[-1][name] = vid
        return vid

    def resolve(self, name: str) -> int:
        for scope in reversed(self._scopes):
            if name in scope:
                return scope[name]
        # constants and states materialize lazily on first reference
        if name in self.graph.constants:
            spec = self.graph.constant_specs[name]
            vid = len(self._values)
            self._values.append(ValueDef(vid, name, spec, ValueKind.CONSTANT, name))
            self._scopes[0][name] = vid
            return vid
        if name in self.graph.states:
            spec = self.graph.state_specs[name]
            vid = len(self._values)
            self._values.append(ValueDef(vid, name, spec, ValueKind.STATE, name))
            self._scopes[0][name] = vid
            return vid
        raise SchemaError(f"method {self.name!r}: unknown value {name!r} "
                          "(cyclic reference, use before definition, or typo)")

    def spec_of(self, vid: int) -> TensorSpec:
        return self._values[vid].spec

    def value(self, vid: int) -> ValueDef:
        return self._values[vid]

    def add_input(self, name: str, spec: TensorSpec) -> int:
        vid = self._define(name, spec, ValueKind.INPUT)
        self._inputs.append(vid)
        return vid

    def ref_constant(self, cname: str) -> int:
        if cname not in self.graph.constants:
            raise SchemaError(f"unknown constant {cname!r}")
        return self.resolve(cname)

    def ref_state(self, sname: str) -> int:
        if sname not in self.graph.states:
            raise SchemaError(f"unknown state {sname!r}")
        return self.resolve(sname)

    # -- node construction --------------------------------------------------

    def _spec_args(self, inputs: list[Argument]) -> list[Arg]:
        args: list[Arg] = []
        for a in inputs:
            if isinstance(a, Scalar):
                args.append(a.value)
            elif isinstance(a, int) and not isinstance(a, bool):
                args.append(self._values[a].spec)
            else:
                raise SchemaError(f"node inputs must be value ids or Scalar literals, got {a!r}")
        return args

    def _emit(self, node: NodeDef) -> None:
        if self._branch_stack:
            self._branch_stack[-1].append(node)
        else:
            self._nodes.append(node)

    def _take_handle(self, debug_handle: int | None) -> int:
        if debug_handle is not None:
            return debug_handle
        h = self._next_handle
        self._next_handle += 1
        return h

    def add_node(self, op: str, inputs: list[Argument], attrs: Mapping[str, Any] | None = None,
                 out_name: str | None = None, debug_handle: int | None = None) -> int:
        """Append a node, inferring and registering its output value."""
        attrs = dict(attrs or {})
        handle = self._take_handle(debug_handle)
        if op == "core.cond":
            raise SchemaError("use add_cond to build control flow")
        if op == "core.copy_":
            return self._add_copy(inputs, handle)
        spec = infer_node_spec(op, self._spec_args(inputs), attrs, self._ctx)
        name = out_name or f"%{len(self._values)}"
        vid = self._define(name, spec, ValueKind.INTERMEDIATE, debug_handle=handle)
        self._emit(NodeDef(op, tuple(inputs), vid, attrs, handle))
        return vid

    def add_raw_node(self, op: str, inputs: list[Argument], out_spec: TensorSpec,
                     attrs: Mapping[str, Any] | None = None, out_name: str | None = None,
                     debug_handle: int | None = None) -> int:
        """Append a node with an explicitly provided output spec, bypassing
        the rule table (used for delegate call nodes)."""
        handle = self._take_handle(debug_handle)
        name = out_name or f"%{len(self._values)}"
        vid = self._define(name, out_spec, ValueKind.INTERMEDIATE, debug_handle=handle)
        self._emit(NodeDef(op, tuple(inputs), vid, dict(attrs or {}), handle))
        return vid

    def _add_copy(self, inputs: list[Argument], handle: int) -> int:
        if len(inputs) != 2:
            raise SchemaError("core.copy_ takes (source value, state value)")
        src, dst = inputs
        if not isinstance(src, int) or not isinstance(dst, int):
            raise SchemaError("core.copy_ operands must be values")
        infer_node_spec("core.copy_", self._spec_args([src, dst]), {}, self._ctx)
        self._emit(NodeDef("core.copy_", (src,), dst, {}, handle))
        return dst

    def add_copy_(self, src: int, state: int, debug_handle: int | None = None) -> int:
        handle = self._take_handle(debug_handle)
        if self._values[state].kind is not ValueKind.STATE:
            raise SchemaError(f"core.copy_ target {self._values[state].name!r} is not a state value")
        return self._add_copy([src, state], handle)

    def add_cond(self, pred: int, build_then: Callable[["MethodBuilder"], int],
                 build_else: Callable[["MethodBuilder"], int],
                 out_name: str | None = None, debug_handle: int | None = None) -> int:
        """Emit a two-way branch. Each build callback appends that branch's
        nodes and returns the branch result value; branch-local names go out
        of scope afterwards, and the branch result must be its final node's
        output so the flattened form can bind the shared output slot."""
        handle = self._take_handle(debug_handle)
        pred_spec = self._values[pred].spec
        if pred_spec.dtype is not DType.U8_BOOL or any(d != 1 for d in pred_spec.shape):
            raise ShapeError(f"core.cond predicate must be a U8_BOOL scalar, got "
                             f"{pred_spec.dtype.value}{pred_spec.shape}")
        branches: list[tuple[NodeDef, ...]] = []
        result_specs: list[TensorSpec] = []
        for build in (build_then, build_else):
            self._scopes.append({})
            self._branch_stack.append([])
            result = build(self)
            nodes = tuple(self._branch_stack.pop())
            self._scopes.pop()
            if not nodes:
                raise SchemaError("core.cond branches must contain at least one node")
            if nodes[-1].output != result:
                raise SchemaError("core.cond branch result must be the final node's output")
            branches.append(nodes)
            result_specs.append(self._values[result].spec)
        if result_specs[0] != result_specs[1]:
            raise ShapeError(f"core.cond branches disagree on result spec: "
                             f"{result_specs[0]} vs {result_specs[1]}")
        name = out_name or f"%{len(self._values)}"
        vid = self._define(name, result_specs[0], ValueKind.INTERMEDIATE, debug_handle=handle)
        self._emit(NodeDef("core.cond", (pred,), vid, {}, handle, (branches[0], branches[1])))
        return vid

    def mark_output(self, vid: int) -> None:
        v = self._values[vid]
        if v.kind is not ValueKind.INTERMEDIATE:
            raise SchemaError(f"method outputs must be node outputs, got {v.kind.value} {v.name!r}")
        self._values[vid] = ValueDef(v.id, v.name, v.spec, ValueKind.OUTPUT, v.constant_ref, v.debug_handle)
        self._outputs.append(vid)

    def build(self) -> Method:
        if not self._outputs:
            raise SchemaError(f"method {self.name!r} declares no outputs")
        m = Method(self.name, tuple(self._inputs), tuple(self._outputs),
                   tuple(self._nodes), tuple(self._values))
        topological_check(m)
        return m


class GraphBuilder:
    def __init__(self, name: str, symbol_bounds: Mapping[str, SymbolBound] | None = None):
        self.name = name
        self.symbol_bounds: dict[str, SymbolBound] = dict(symbol_bounds or {})
        self.constants: dict[str, np.ndarray] = {}
        self.constant_specs: dict[str, TensorSpec] = {}
        self.states: dict[str, np.ndarray] = {}
        self.state_specs: dict[str, TensorSpec] = {}
        self._methods: dict[str, MethodBuilder] = {}

    def add_constant(self, name: str, payload: np.ndarray, spec: TensorSpec | None = None) -> str:
        if name in self.constants or name in self.states:
            raise SchemaError(f"duplicate constant/state name {name!r}")
        if spec is None:
            spec = TensorSpec(dtype_of_array(payload), tuple(int(d) for d in payload.shape))
        self.constants[name] = payload
        self.constant_specs[name] = spec
        return name

    def add_state(self, name: str, payload: np.ndarray, spec: TensorSpec | None = None) -> str:
        if name in self.constants or name in self.states:
            raise SchemaError(f"duplicate constant/state name {name!r}")
        if spec is None:
            spec = TensorSpec(dtype_of_array(payload), tuple(int(d) for d in payload.shape))
        if not spec.is_static:
            raise SchemaError(f"state {name!r} must have a static shape")
        self.states[name] = payload
        self.state_specs[name] = spec
        return name

    def method(self, name: str = "forward") -> MethodBuilder:
        if name in self._methods:
            raise SchemaError(f"duplicate method name {name!r}")
        mb = MethodBuilder(name, self)
        self._methods[name] = mb
        return mb

    def build(self, dialect: DialectLevel = DialectLevel.EXPORT) -> ExportGraph:
        methods = {name: mb.build() for name, mb in self._methods.items()}
        if not methods:
            raise SchemaError("graph has no methods")
        return ExportGraph(
            name=self.name,
            methods=methods,
            constants=dict(self.constants),
            constant_specs=dict(self.constant_specs),
            states=dict(self.states),
            state_specs=dict(self.state_specs),
            symbol_bounds=dict(self.symbol_bounds),
            dialect_level=dialect,
        )
