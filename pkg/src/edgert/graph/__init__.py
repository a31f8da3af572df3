"""Graph IR: types, ingestion, lowering passes, and the eager oracle."""

from .builder import GraphBuilder, MethodBuilder
from .eager import EagerResult, choose_qparams_rows, eager_execute, unpack_w4_codes
from .ops import OP_RULES, RuleContext, broadcast_shapes, infer_node_spec
from .parser import parse_model, parse_model_file
from .passes import (
    ValidationReport,
    check_edge_dialect,
    decompose,
    functionalize,
    infer_shapes,
    rebuild_graph,
    run_edge_passes,
    specialize,
    to_edge,
)
from .types import (
    CORE_OPS,
    DELEGATE_CALL_OP,
    HL_OPS,
    Argument,
    DialectLevel,
    Dim,
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

__all__ = [
    "CORE_OPS", "DELEGATE_CALL_OP", "HL_OPS",
    "Argument", "DialectLevel", "Dim", "EagerResult", "ExportGraph",
    "GraphBuilder", "Method", "MethodBuilder", "NodeDef", "OP_RULES",
    "RuleContext", "Scalar", "SymbolBound", "TensorSpec", "ValidationReport",
    "ValueDef", "ValueKind",
    "broadcast_shapes", "check_edge_dialect", "choose_qparams_rows",
    "decompose", "eager_execute", "functionalize", "infer_node_spec",
    "infer_shapes", "parse_model", "parse_model_file", "rebuild_graph",
    "run_edge_passes", "specialize", "to_edge", "topological_check",
    "unpack_w4_codes",
]
