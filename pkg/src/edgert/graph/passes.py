"""Lowering passes: EXPORT graphs -> edge dialect.

``to_edge`` runs three passes in order:

  decompose     expand high-level ops (rms_norm, silu, linear_bias) into
                core-op sequences, inheriting the source debug handle
  functionalize verify the graph is mutation-free apart from verbatim state
                copies (ingestion produces functional graphs, so this is a
                structural audit rather than a rewrite)
  specialize    stamp a contiguous dim order onto every value

The pass pipeline is idempotent; ``to_edge`` itself requires an EXPORT
graph. ``check_edge_dialect`` reports (rather than raises) every dialect
violation so tests and tooling can inspect malformed graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from ..errors import DecomposeError, EdgeRtError, FunctionalizeError, ShapeError
from ..tensors import DType
from .builder import GraphBuilder, MethodBuilder
from .types import (
    CORE_OPS,
    DELEGATE_CALL_OP,
    DialectLevel,
    ExportGraph,
    Method,
    NodeDef,
    Scalar,
    TensorSpec,
    ValueKind,
    topological_check,
)

# ---------------------------------------------------------------------------
# graph rebuilding scaffold

NodeTransform = Callable[[MethodBuilder, NodeDef, "dict[int, int]", Method], int]


def rebuild_graph(g: ExportGraph, transform: NodeTransform,
                  dialect: DialectLevel | None = None) -> ExportGraph:
    """Reconstruct every method through a fresh builder, letting
    ``transform`` decide what each node becomes. Shape inference reruns as a
    side effect of construction."""
    gb = GraphBuilder(g.name, g.symbol_bounds)
    for name, payload in g.constants.items():
        gb.add_constant(name, payload, g.constant_specs[name])
    for name, payload in g.states.items():
        gb.add_state(name, payload, g.state_specs[name])

    for mname, m in g.methods.items():
        mb = gb.method(mname)
        remap: dict[int, int] = {}
        for vid in m.inputs:
            v = m.value(vid)
            remap[vid] = mb.add_input(v.name, strip_order(v.spec))
        _rebuild_nodes(mb, m.nodes, remap, m, transform)
        for vid in m.outputs:
            mb.mark_output(remap[vid])
    return gb.build(dialect or g.dialect_level)


def _rebuild_nodes(mb: MethodBuilder, nodes, remap: dict[int, int], m: Method,
                   transform: NodeTransform) -> None:
    for node in nodes:
        _ensure_refs(mb, node, remap, m)
        if node.op == "core.cond":
            def branch(body):
                def build(b: MethodBuilder) -> int:
                    _rebuild_nodes(b, body, remap, m, transform)
                    return remap[body[-1].output]
                return build
            out = mb.add_cond(remap_arg(node.inputs[0], remap), branch(node.branches[0]),
                              branch(node.branches[1]), out_name=preserved_name(m, node.output),
                              debug_handle=node.debug_handle)
        else:
            out = transform(mb, node, remap, m)
        remap[node.output] = out


def _ensure_refs(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method) -> None:
    """Materialize constant/state references a node needs in the new method."""
    for vid in node.value_inputs():
        if vid in remap:
            continue
        v = m.value(vid)
        if v.kind is ValueKind.CONSTANT:
            remap[vid] = mb.ref_constant(v.constant_ref)
        elif v.kind is ValueKind.STATE:
            remap[vid] = mb.ref_state(v.constant_ref)
        else:
            raise ShapeError(f"value {v.name!r} used before production during rebuild")
    if node.op == "core.copy_":
        v = m.value(node.output)
        if v.kind is ValueKind.STATE and node.output not in remap:
            remap[node.output] = mb.ref_state(v.constant_ref)


def remap_arg(a, remap: dict[int, int]):
    return a if isinstance(a, Scalar) else remap[a]


def preserved_name(m: Method, vid: int) -> str | None:
    """Keep user-facing names for method outputs; intermediates regenerate
    synthetic names so pass-inserted nodes can never collide."""
    return m.value(vid).name if vid in m.outputs else None


def copy_node(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method) -> int:
    inputs = [remap_arg(a, remap) for a in node.inputs]
    if node.op == "core.copy_":
        return mb.add_copy_(inputs[0], remap[node.output], debug_handle=node.debug_handle)
    if node.op == DELEGATE_CALL_OP:
        return mb.add_raw_node(node.op, inputs, m.value(node.output).spec, node.attrs,
                               out_name=preserved_name(m, node.output), debug_handle=node.debug_handle)
    return mb.add_node(node.op, inputs, node.attrs, out_name=preserved_name(m, node.output),
                       debug_handle=node.debug_handle)


def strip_order(spec: TensorSpec) -> TensorSpec:
    return replace(spec, dim_order=None) if spec.dim_order is not None else spec


# ---------------------------------------------------------------------------
# decompose

def _decompose_rms_norm(mb: MethodBuilder, x: int, w: int, eps: float, h: int,
                        out_name: str) -> int:
    sq = mb.add_node("core.mul", [x, x], debug_handle=h)
    ms = mb.add_node("core.mean_dim", [sq], {"axis": -1, "keepdim": True}, debug_handle=h)
    stable = mb.add_node("core.add", [ms, Scalar(eps)], debug_handle=h)
    inv = mb.add_node("core.rsqrt", [stable], debug_handle=h)
    normed = mb.add_node("core.mul", [x, inv], debug_handle=h)
    return mb.add_node("core.mul", [normed, w], out_name=out_name, debug_handle=h)


def _decompose(mb: MethodBuilder, node: NodeDef, remap: dict[int, int], m: Method) -> int:
    if not node.op.startswith("hl."):
        return copy_node(mb, node, remap, m)
    h = node.debug_handle
    out_name = preserved_name(m, node.output)
    inputs = [remap_arg(a, remap) for a in node.inputs]
    if node.op == "hl.rms_norm":
        eps = float(node.attrs.get("eps", 1e-6))
        return _decompose_rms_norm(mb, inputs[0], inputs[1], eps, h, out_name)
    if node.op == "hl.silu":
        gate = mb.add_node("core.sigmoid", [inputs[0]], debug_handle=h)
        return mb.add_node("core.mul", [inputs[0], gate], out_name=out_name, debug_handle=h)
    if node.op == "hl.linear_bias":
        return mb.add_node("core.linear", inputs, out_name=out_name, debug_handle=h)
    raise DecomposeError(f"no decomposition rule for {node.op!r}")


def decompose(g: ExportGraph) -> ExportGraph:
    return rebuild_graph(g, _decompose)


# ---------------------------------------------------------------------------
# functionalize (audit)

def functionalize(g: ExportGraph) -> ExportGraph:
    """Verify the only mutations are verbatim state copies and attention
    cache writebacks. Ingestion cannot express aliasing, so a violation here
    means a pass constructed an invalid graph."""
    for m in g.methods.values():
        for node in m.all_nodes():
            if node.op == "core.copy_":
                if m.value(node.output).kind is not ValueKind.STATE:
                    raise FunctionalizeError(
                        f"method {m.name!r}: copy_ targets non-state value "
                        f"{m.value(node.output).name!r} and cannot be functionalized")
            elif node.op == "custom.sdpa_with_kv_cache":
                n_state = 5 if bool(node.attrs.get("quantize_cache", False)) else 3
                state_args = list(node.value_inputs())[3:3 + n_state]
                for vid in state_args:
                    if m.value(vid).kind is not ValueKind.STATE:
                        raise FunctionalizeError(
                            f"method {m.name!r}: attention cache argument "
                            f"{m.value(vid).name!r} is not a state value")
    return g


# ---------------------------------------------------------------------------
# specialize

def specialize(g: ExportGraph) -> ExportGraph:
    """Assign the contiguous (identity) dim order to every value that lacks
    one. Layout changes only ever come from permute_copy, which materializes
    contiguous output, so identity order is correct everywhere."""
    def fix(m: Method) -> Method:
        values = tuple(
            replace(v, spec=v.spec.with_dim_order(tuple(range(v.spec.rank))))
            if v.spec.dim_order is None else v
            for v in m.values
        )
        return replace(m, values=values)
    return replace(g, methods={k: fix(m) for k, m in g.methods.items()},
                   dialect_level=DialectLevel.EDGE)


def run_edge_passes(g: ExportGraph) -> ExportGraph:
    """The idempotent pass pipeline behind to_edge."""
    return specialize(functionalize(decompose(g)))


def to_edge(g: ExportGraph) -> ExportGraph:
    if g.dialect_level is not DialectLevel.EXPORT:
        raise EdgeRtError("to_edge requires an EXPORT-level graph")
    out = run_edge_passes(g)
    report = check_edge_dialect(out)
    assert report.ok, f"edge lowering produced dialect violations: {report.violations}"
    return out


# ---------------------------------------------------------------------------
# dialect checker

@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "ok" if self.ok else "\n".join(self.violations)


def check_edge_dialect(g: ExportGraph) -> ValidationReport:
    """Structural audit of the edge dialect contract. Returns a report
    listing zero violations iff all ops are in the core set (delegate calls
    admitted), state updates only target states, every spec is specialized,
    and each method is SSA and acyclic."""
    violations: list[str] = []
    for m in g.methods.values():
        where = f"method {m.name!r}"
        try:
            topological_check(m)
        except ShapeError as exc:
            violations.append(f"{where}: {exc}")
        for node in m.all_nodes():
            if node.op not in CORE_OPS and node.op != DELEGATE_CALL_OP:
                violations.append(f"{where}: op not in core set: {node.op}")
            if node.op == "core.copy_":
                target = m.value(node.output)
                if target.kind is not ValueKind.STATE:
                    violations.append(f"{where}: state update on non-state value {target.name!r}")
            if node.op == "custom.sdpa_with_kv_cache":
                n_state = 5 if bool(node.attrs.get("quantize_cache", False)) else 3
                for vid in list(node.value_inputs())[3:3 + n_state]:
                    if m.value(vid).kind is not ValueKind.STATE:
                        violations.append(
                            f"{where}: attention cache argument {m.value(vid).name!r} is not a state")
        for v in m.values:
            if v.spec.dim_order is None:
                violations.append(f"{where}: value {v.name!r} has no dim_order (unspecialized)")
            if v.spec.dtype is DType.PACKED_U4 and v.kind is not ValueKind.CONSTANT:
                violations.append(f"{where}: packed 4-bit dtype on non-constant value {v.name!r}")
    return ValidationReport(violations)


# ---------------------------------------------------------------------------
# shape re-inference

def infer_shapes(g: ExportGraph) -> ExportGraph:
    """Recompute every intermediate spec from the per-op rules, propagating
    symbolic dims. Idempotent; raises ShapeError on any rule violation."""
    out = rebuild_graph(g, copy_node)
    if g.dialect_level is DialectLevel.EDGE:
        out = specialize(out)
    return out
