"""Typed operation-graph IR.

Two dialect levels share one data structure. EXPORT graphs may contain
high-level ``hl.*`` ops and unspecialized tensor specs; EDGE graphs are
restricted to the core operator set, are fully functional (the state-copy op
and the attention cache op are the only sanctioned mutations), and carry a
dtype plus a dim order on every value.

Graphs are immutable after construction: passes build new graphs, so a graph
can be shared read-only across concurrent compile jobs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterator, Mapping, Sequence, Union

import numpy as np

from ..errors import SchemaError, ShapeError
from ..tensors import DType, payload_nbytes

# A dimension is either a concrete size or a symbol name bounded by the
# graph's symbol table.
Dim = Union[int, str]

Literal = Union[int, float, bool]


@dataclass(frozen=True)
class Scalar:
    """Inline scalar literal in a node's input list, kept distinct from
    value ids (which are plain ints)."""

    value: Literal


# Node inputs are value ids or inline scalar literals.
Argument = Union[int, Scalar]


class DialectLevel(str, Enum):
    EXPORT = "EXPORT"
    EDGE = "EDGE"


class ValueKind(str, Enum):
    INPUT = "input"
    CONSTANT = "constant"
    STATE = "state"
    INTERMEDIATE = "intermediate"
    OUTPUT = "output"


# The closed operator vocabulary of the edge dialect. 25 entries; the state
# copy is the only mutating op and may only target state values.
CORE_OPS = frozenset({
    "core.add", "core.sub", "core.mul", "core.div",
    "core.neg", "core.exp", "core.rsqrt",
    "core.matmul", "core.linear",
    "core.relu", "core.sigmoid", "core.softmax",
    "core.permute_copy", "core.slice_copy", "core.cat",
    "core.embedding", "core.mean_dim",
    "core.cond", "core.copy_",
    "q.quantize_per_tensor", "q.dequantize_per_tensor",
    "q.choose_qparams_per_token", "q.linear_8w", "q.linear_4w",
    "custom.sdpa_with_kv_cache",
})

# High-level ops accepted at EXPORT level; the decompose pass expands them.
HL_OPS = frozenset({"hl.rms_norm", "hl.silu", "hl.linear_bias"})

# Synthetic op emitted by delegation; admitted by the edge checker.
DELEGATE_CALL_OP = "delegate.call"

STATE_MUTATING_OPS = frozenset({"core.copy_", "custom.sdpa_with_kv_cache"})


@dataclass(frozen=True)
class TensorSpec:
    """Dtype + shape + physical layout of one value.

    ``dim_order`` lists axis indices outermost-first; ``None`` means the
    layout has not been specialized yet (EXPORT level only).
    """

    dtype: DType
    shape: tuple[Dim, ...]
    dim_order: tuple[int, ...] | None = None

    def __post_init__(self):
        for d in self.shape:
            if isinstance(d, int) and d < 0:
                raise ShapeError(f"negative dimension {d} in {self.shape}")
        if self.dim_order is not None and sorted(self.dim_order) != list(range(len(self.shape))):
            raise ShapeError(f"dim_order {self.dim_order} is not a permutation of 0..{len(self.shape) - 1}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def is_static(self) -> bool:
        return all(isinstance(d, int) for d in self.shape)

    def symbols(self) -> set[str]:
        return {d for d in self.shape if isinstance(d, str)}

    def max_shape(self, bounds: Mapping[str, "SymbolBound"]) -> tuple[int, ...]:
        """Concrete upper-bound shape, resolving symbols to their max."""
        out = []
        for d in self.shape:
            if isinstance(d, int):
                out.append(d)
            else:
                out.append(bounds[d].max)
        return tuple(out)

    def max_nbytes(self, bounds: Mapping[str, "SymbolBound"]) -> int:
        return payload_nbytes(self.dtype, self.max_shape(bounds))

    def with_dim_order(self, order: tuple[int, ...]) -> "TensorSpec":
        return replace(self, dim_order=order)


@dataclass(frozen=True)
class SymbolBound:
    min: int
    max: int

    def __post_init__(self):
        if self.min < 1 or self.max < self.min:
            raise SchemaError(f"symbol bounds must satisfy 1 <= min <= max, got [{self.min}, {self.max}]")


@dataclass(frozen=True)
class ValueDef:
    id: int
    name: str
    spec: TensorSpec
    kind: ValueKind
    constant_ref: str | None = None
    debug_handle: int = -1


@dataclass(frozen=True)
class NodeDef:
    """Single-output operation. Multi-branch control flow carries its two
    inline sub-sequences in ``branches``; all other ops leave it None."""

    op: str
    inputs: tuple[Argument, ...]
    output: int
    attrs: Mapping[str, Any] = field(default_factory=dict)
    debug_handle: int = -1
    branches: tuple[tuple["NodeDef", ...], tuple["NodeDef", ...]] | None = None

    def value_inputs(self) -> Iterator[int]:
        for a in self.inputs:
            if not isinstance(a, Scalar):
                yield a

    def walk(self) -> Iterator["NodeDef"]:
        """This node, then branch nodes depth-first (cond only)."""
        yield self
        if self.branches is not None:
            for branch in self.branches:
                for n in branch:
                    yield from n.walk()


@dataclass(frozen=True)
class Method:
    name: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    nodes: tuple[NodeDef, ...]
    values: tuple[ValueDef, ...]

    def value(self, vid: int) -> ValueDef:
        return self.values[vid]

    def all_nodes(self) -> Iterator[NodeDef]:
        """Every node including ones inside cond branches."""
        for n in self.nodes:
            yield from n.walk()


@dataclass(frozen=True)
class ExportGraph:
    """A parsed model: methods plus shared constant/state payloads."""

    name: str
    methods: Mapping[str, Method]
    constants: Mapping[str, np.ndarray]
    constant_specs: Mapping[str, TensorSpec]
    states: Mapping[str, np.ndarray]
    state_specs: Mapping[str, TensorSpec]
    symbol_bounds: Mapping[str, SymbolBound]
    dialect_level: DialectLevel = DialectLevel.EXPORT

    def method(self, name: str | None = None) -> Method:
        if name is None:
            if len(self.methods) != 1:
                raise KeyError(f"graph has {len(self.methods)} methods; name one of {sorted(self.methods)}")
            return next(iter(self.methods.values()))
        return self.methods[name]

    def payload_for(self, ref: str) -> np.ndarray:
        if ref in self.constants:
            return self.constants[ref]
        if ref in self.states:
            return self.states[ref]
        raise KeyError(ref)


def topological_check(method: Method) -> None:
    """Verify SSA and def-before-use over the node list (branches included).

    Each value id must be produced exactly once (state updates exempt), and
    every node input must be an input/constant/state or a previously
    produced value.
    """
    produced: set[int] = set()
    for v in method.values:
        if v.kind in (ValueKind.INPUT, ValueKind.CONSTANT, ValueKind.STATE):
            produced.add(v.id)

    def visit(nodes: Sequence[NodeDef]) -> None:
        for node in nodes:
            for vid in node.value_inputs():
                if vid not in produced:
                    raise ShapeError(
                        f"{node.op} reads value {vid} before it is produced (non-topological or cyclic)")
            if node.branches is not None:
                for branch in node.branches:
                    visit(branch)
            if node.op == "core.copy_":
                # in-place update of an existing value, not an SSA def; the
                # dialect checker owns the only-targets-state rule
                continue
            if node.output in produced:
                raise ShapeError(f"value {node.output} produced more than once (SSA violation)")
            produced.add(node.output)

    visit(method.nodes)
    for out in method.outputs:
        if out not in produced:
            raise ShapeError(f"method output {out} is never produced")
