"""Structured, pass-friendly IR for WebAssembly (MVP) modules.

Function bodies are flat instruction sequences with explicit ``end``
markers; nesting is implicit and recovered with a depth counter, which is
what the rewriting passes iterate with.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

VALTYPES = ("i32", "i64", "f32", "f64")

VALTYPE_BYTE = {"i32": 0x7F, "i64": 0x7E, "f32": 0x7D, "f64": 0x7C}
BYTE_VALTYPE = {v: k for k, v in VALTYPE_BYTE.items()}

FUNCREF = 0x70


class WasmError(Exception):
    """Base class for all toolkit errors."""


class MalformedBinary(WasmError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed binary at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class UnsupportedFeature(WasmError):
    def __init__(self, name: str):
        super().__init__(f"unsupported WebAssembly feature: {name}")
        self.feature = name


class EncodingOverflow(WasmError):
    pass


class MultiValueUnsupported(UnsupportedFeature):
    def __init__(self):
        super().__init__("multi-value")


@dataclass
class SiteInfo:
    """Metadata attached to an inserted instruction by a pass.

    ``function`` is filled in when the module-level pass finishes; ``id``
    holds the canary value for oracle sites and the branch-site id for
    coverage sites.
    """

    kind: str
    id: int = 0
    function: int = -1


@dataclass(frozen=True)
class Instr:
    op: str
    args: tuple = ()
    site: Optional[SiteInfo] = field(default=None, compare=False, repr=False)

    def __repr__(self) -> str:  # keeps assertion diffs readable
        if not self.args:
            return self.op
        return f"{self.op} {' '.join(str(a) for a in self.args)}"


def I(op: str, *args) -> Instr:
    """Shorthand instruction constructor used by passes and tests."""
    return Instr(op, tuple(args))


@dataclass(frozen=True)
class FuncType:
    params: tuple[str, ...]
    results: tuple[str, ...]

    def __post_init__(self):
        if len(self.results) > 1:
            raise MultiValueUnsupported()


@dataclass(frozen=True)
class Import:
    module: str
    name: str
    kind: str  # "func" | "table" | "memory" | "global"
    # func: type index; global: (valtype, mutable); memory: (min, max);
    # table: (min, max)
    desc: tuple | int


@dataclass
class FunctionIR:
    type_idx: int
    locals: list[str] = field(default_factory=list)
    body: list[Instr] = field(default_factory=list)

    def copy(self) -> "FunctionIR":
        return FunctionIR(self.type_idx, list(self.locals), list(self.body))

    def __eq__(self, other):
        if not isinstance(other, FunctionIR):
            return NotImplemented
        return (
            self.type_idx == other.type_idx
            and self.locals == other.locals
            and self.body == other.body
        )


@dataclass
class Global:
    valtype: str
    mutable: bool
    init: list[Instr]

    def __eq__(self, other):
        if not isinstance(other, Global):
            return NotImplemented
        return (
            self.valtype == other.valtype
            and self.mutable == other.mutable
            and self.init == other.init
        )


@dataclass(frozen=True)
class Export:
    name: str
    kind: str  # "func" | "table" | "memory" | "global"
    index: int


@dataclass
class DataSegment:
    offset: list[Instr]
    data: bytes

    def __eq__(self, other):
        if not isinstance(other, DataSegment):
            return NotImplemented
        return self.offset == other.offset and self.data == other.data


@dataclass
class ElemSegment:
    offset: list[Instr]
    func_indices: list[int]

    def __eq__(self, other):
        if not isinstance(other, ElemSegment):
            return NotImplemented
        return (
            self.offset == other.offset
            and self.func_indices == other.func_indices
        )


@dataclass
class CustomSection:
    name: str
    data: bytes
    # id of the last standard section seen before this one; keeps the
    # custom section in roughly its original position on re-encode
    after_section: int = 0


@dataclass
class ModuleIR:
    types: list[FuncType] = field(default_factory=list)
    imports: list[Import] = field(default_factory=list)
    functions: list[FunctionIR] = field(default_factory=list)
    table: Optional[tuple[int, Optional[int]]] = None
    memory: Optional[tuple[int, Optional[int]]] = None
    globals: list[Global] = field(default_factory=list)
    exports: list[Export] = field(default_factory=list)
    start: Optional[int] = None
    elems: list[ElemSegment] = field(default_factory=list)
    data_segments: list[DataSegment] = field(default_factory=list)
    names: dict[int, str] = field(default_factory=dict)
    custom_sections: list[CustomSection] = field(default_factory=list)

    # ---- index-space helpers -------------------------------------------

    def imported(self, kind: str) -> list[Import]:
        return [im for im in self.imports if im.kind == kind]

    @property
    def num_imported_funcs(self) -> int:
        return len(self.imported("func"))

    @property
    def num_imported_globals(self) -> int:
        return len(self.imported("global"))

    @property
    def num_funcs(self) -> int:
        return self.num_imported_funcs + len(self.functions)

    @property
    def num_globals(self) -> int:
        return self.num_imported_globals + len(self.globals)

    def func_type(self, func_idx: int) -> FuncType:
        """Signature of a function in the module function index space."""
        imported = self.imported("func")
        if func_idx < len(imported):
            return self.types[imported[func_idx].desc]
        return self.types[self.functions[func_idx - len(imported)].type_idx]

    def defined_func(self, func_idx: int) -> FunctionIR:
        n = self.num_imported_funcs
        if func_idx < n:
            raise IndexError(f"function {func_idx} is imported")
        return self.functions[func_idx - n]

    def global_type(self, global_idx: int) -> tuple[str, bool]:
        imported = self.imported("global")
        if global_idx < len(imported):
            return imported[global_idx].desc
        g = self.globals[global_idx - len(imported)]
        return (g.valtype, g.mutable)

    def export_map(self) -> dict[str, Export]:
        return {e.name: e for e in self.exports}

    def add_type(self, ft: FuncType) -> int:
        """Index of ``ft``, appending it if not already present."""
        for i, t in enumerate(self.types):
            if t == ft:
                return i
        self.types.append(ft)
        return len(self.types) - 1

    def copy(self) -> "ModuleIR":
        return ModuleIR(
            types=list(self.types),
            imports=list(self.imports),
            functions=[f.copy() for f in self.functions],
            table=self.table,
            memory=self.memory,
            globals=[replace(g, init=list(g.init)) for g in self.globals],
            exports=list(self.exports),
            start=self.start,
            elems=[
                ElemSegment(list(e.offset), list(e.func_indices))
                for e in self.elems
            ],
            data_segments=[
                DataSegment(list(d.offset), d.data) for d in self.data_segments
            ],
            names=dict(self.names),
            custom_sections=list(self.custom_sections),
        )

    def __eq__(self, other):
        if not isinstance(other, ModuleIR):
            return NotImplemented
        return (
            self.types == other.types
            and self.imports == other.imports
            and self.functions == other.functions
            and self.table == other.table
            and self.memory == other.memory
            and self.globals == other.globals
            and self.exports == other.exports
            and self.start == other.start
            and self.elems == other.elems
            and self.data_segments == other.data_segments
            and self.names == other.names
            and [(c.name, c.data) for c in self.custom_sections]
            == [(c.name, c.data) for c in other.custom_sections]
        )


def add_global(m: ModuleIR, valtype: str, mutable: bool, init: list[Instr]) -> int:
    """Append a defined global; returns its module-wide global index.

    Existing indices are untouched (defined globals always come after all
    imported globals in the index space).
    """
    m.globals.append(Global(valtype, mutable, init))
    return m.num_imported_globals + len(m.globals) - 1


def add_fresh_local(m: ModuleIR, f: FunctionIR, valtype: str) -> int:
    """Append a local of ``valtype``; returns its local index."""
    n_params = len(m.types[f.type_idx].params)
    f.locals.append(valtype)
    return n_params + len(f.locals) - 1
