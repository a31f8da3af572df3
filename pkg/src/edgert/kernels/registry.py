"""Kernel registration and selective build.

Kernels are stateless functions keyed by operator name plus the dtype
signature of their tensor inputs. The full library registers at import
time; a runtime registry is built from a selection manifest and contains
exactly the requested op+dtype entries, so resolution failures happen when
the registry is built or a method initializes, never mid-execution.

Resolution is a binary search over the sorted key table and is counted, so
tests can assert the execute phase performs zero lookups.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from ..errors import UnknownOpKey


@dataclass(frozen=True, order=True)
class OpKey:
    op: str
    dtypes: tuple[str, ...] = ()

    def __str__(self) -> str:
        return f"{self.op}:{','.join(self.dtypes)}"

    @classmethod
    def parse(cls, text: str) -> "OpKey":
        text = text.strip()
        if ":" not in text:
            raise UnknownOpKey(f"manifest entry {text!r} must look like 'op:dtype,dtype'")
        op, _, sig = text.partition(":")
        dtypes = tuple(d for d in sig.split(",") if d)
        return cls(op, dtypes)


# fn(args, attrs, out): args holds numpy views and raw scalars in node
# order; out is a slot with a write(array) method. State-mutating kernels
# write through their argument views instead.
KernelFn = Callable[[Sequence[Any], Mapping[str, Any], Any], None]


@dataclass(frozen=True)
class KernelEntry:
    key: OpKey
    fn: KernelFn
    mutates_state: bool = False


KERNEL_LIBRARY: dict[OpKey, KernelEntry] = {}


def register_kernel(op: str, dtypes: Sequence[str], mutates_state: bool = False):
    """Module-level registration decorator for library kernels."""
    key = OpKey(op, tuple(dtypes))

    def wrap(fn: KernelFn) -> KernelFn:
        if key in KERNEL_LIBRARY:
            raise ValueError(f"duplicate kernel registration for {key}")
        KERNEL_LIBRARY[key] = KernelEntry(key, fn, mutates_state)
        return fn

    return wrap


@dataclass(frozen=True)
class SelectionManifest:
    keys: tuple[OpKey, ...]

    @classmethod
    def from_keys(cls, keys: Iterable[OpKey]) -> "SelectionManifest":
        return cls(tuple(sorted(set(keys))))

    @classmethod
    def full(cls) -> "SelectionManifest":
        return cls.from_keys(KERNEL_LIBRARY)

    @classmethod
    def parse(cls, text: str) -> "SelectionManifest":
        keys = [OpKey.parse(line) for line in text.splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
        return cls.from_keys(keys)

    def serialize(self) -> str:
        return "\n".join(str(k) for k in self.keys) + "\n"

    def union(self, other: "SelectionManifest") -> "SelectionManifest":
        return SelectionManifest.from_keys((*self.keys, *other.keys))

    def __len__(self) -> int:
        return len(self.keys)


class KernelRegistry:
    """Sorted op-key table with integer-index dispatch.

    ``resolve`` is the only name-based lookup and increments
    ``resolve_calls``; execution dispatches through ``entry_at`` with the
    indices captured at init.
    """

    def __init__(self, entries: Sequence[KernelEntry]):
        self._entries = tuple(sorted(entries, key=lambda e: e.key))
        self._keys = [e.key for e in self._entries]
        self.resolve_calls = 0

    @classmethod
    def from_manifest(cls, manifest: SelectionManifest) -> "KernelRegistry":
        entries = []
        for key in manifest.keys:
            entry = KERNEL_LIBRARY.get(key)
            if entry is None:
                raise UnknownOpKey(f"kernel library has no entry for {key}")
            entries.append(entry)
        return cls(entries)

    @classmethod
    def full(cls) -> "KernelRegistry":
        return cls.from_manifest(SelectionManifest.full())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: OpKey) -> bool:
        i = bisect.bisect_left(self._keys, key)
        return i < len(self._keys) and self._keys[i] == key

    def keys(self) -> tuple[OpKey, ...]:
        return tuple(self._keys)

    def resolve(self, key: OpKey) -> int:
        """Name-based lookup; init-time only. Returns the dispatch index."""
        self.resolve_calls += 1
        i = bisect.bisect_left(self._keys, key)
        if i >= len(self._keys) or self._keys[i] != key:
            raise KeyError(key)
        return i

    def entry_at(self, index: int) -> KernelEntry:
        return self._entries[index]


class ArrayOut:
    """Stand-in output slot for direct kernel unit tests."""

    def __init__(self):
        self.value = None

    def write(self, arr) -> None:
        self.value = arr
