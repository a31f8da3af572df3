"""Exception hierarchy for the toolchain.

Every failure mode raised by the compiler, formats, and runtime derives from
EdgeRtError so callers can catch toolchain errors as a family. Classes that
carry structured context expose it as attributes in addition to the message.
"""

from __future__ import annotations


class EdgeRtError(Exception):
    """Base class for all toolchain errors."""


# --- graph ingestion / IR ---

class SchemaError(EdgeRtError):
    """Model file does not conform to the ingestion schema."""


class UnknownOp(EdgeRtError):
    """Operator name not recognized by the op table."""


class ShapeError(EdgeRtError):
    """Operator shape rules violated during inference or validation."""


class DecomposeError(EdgeRtError):
    """High-level op with no decomposition rule."""


class FunctionalizeError(EdgeRtError):
    """Aliasing or mutation that cannot be rewritten to functional form."""


class ArityError(EdgeRtError):
    """Wrong number of operands for an operator."""


class ShapeMismatch(EdgeRtError):
    """Concrete tensor does not match the declared spec."""


# --- quantization ---

class NonPositiveScale(EdgeRtError):
    """Quantization scale must be strictly positive."""


class IndivisibleGroup(EdgeRtError):
    """Weight inner dimension not divisible by the group size."""


class EmptyCalibrationSet(EdgeRtError):
    """Static quantization requires at least one calibration batch."""


class MissingStats(EdgeRtError):
    """Observer stats missing for an annotated edge during convert."""


# --- delegation ---

class CompileError(EdgeRtError):
    """Delegate AOT compiler rejected a partition."""


class UnsupportedOp(EdgeRtError):
    """Delegate asked to compile an op outside its declared support set."""


class VersionMismatch(EdgeRtError):
    """Delegate blob format version differs from the runtime library."""


class SignatureMismatch(EdgeRtError):
    """Inputs do not match the blob entry signature."""


# --- container formats ---

class DanglingBlob(EdgeRtError):
    """Program references a delegate blob that was not provided."""


class NameCollision(EdgeRtError):
    """Two distinct payloads registered under one name."""


class BadMagic(EdgeRtError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(EdgeRtError):
    """Container version not handled by this parser."""


class CorruptTable(EdgeRtError):
    """Segment or entry table points outside the file."""


class HashMismatch(EdgeRtError):
    """Segment payload does not match its stored content hash."""

    def __init__(self, segment_id: int, message: str | None = None):
        self.segment_id = segment_id
        super().__init__(message or f"segment {segment_id} failed hash verification")


class DuplicateName(EdgeRtError):
    """Named data file already holds an entry with this name."""


class MissingEntry(EdgeRtError):
    """Named tensor absent from the linked data file."""

    def __init__(self, name: str, message: str | None = None):
        self.name = name
        super().__init__(message or f"named data entry not found: {name!r}")


# --- kernels / runtime ---

class UnknownOpKey(EdgeRtError):
    """Selection manifest names an op+dtype the library does not provide."""


class GroupMismatch(EdgeRtError):
    """Group-quantized operands disagree on group geometry."""


class ContextOverflow(EdgeRtError):
    """Non-windowed KV cache is full."""


class MissingOperator(EdgeRtError):
    """Registry cannot resolve an op the program needs (raised at init)."""

    def __init__(self, op: str, dtype_sig: tuple[str, ...]):
        self.op = op
        self.dtype_sig = dtype_sig
        super().__init__(f"no kernel registered for {op} with dtypes {'/'.join(dtype_sig) or '()'}")


class ArenaTooSmall(EdgeRtError):
    """Caller-provided arena is smaller than the plan demands."""

    def __init__(self, required: int, provided: int, arena: str = "planned"):
        self.required = required
        self.provided = provided
        self.arena = arena
        super().__init__(f"{arena} arena too small: requires {required} bytes, got {provided}")


class RuntimeFault(EdgeRtError):
    """Execution failed at a specific instruction."""

    def __init__(self, instruction_index: int, debug_handle: int, message: str):
        self.instruction_index = instruction_index
        self.debug_handle = debug_handle
        super().__init__(f"instruction {instruction_index} (debug handle {debug_handle}): {message}")


# --- devtools ---

class HandleMismatch(EdgeRtError):
    """Trace log and debug map come from different exports."""
