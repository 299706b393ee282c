"""Deterministic in-process interpreter for MVP Wasm with a WASI subset.

The engine preprocesses a module once (validation, body compilation, a
bulk-fill peephole); instances are cheap and isolated, each run is fuel
metered, and traps are classified for crash triage.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

from .ir import FuncType, ModuleIR, WasmError
from .passes.sites import SiteTable
from .validate import validate_module

M32 = 0xFFFFFFFF
M64 = 0xFFFFFFFFFFFFFFFF
PAGE = 65536
TRACE_BITS_SIZE = 65536
ACCESSOR_EXPORT = "__fuzzm_trace_bits"

# trap kinds
UNREACHABLE = "Unreachable"
MEM_OOB = "MemoryOutOfBounds"
DIV_ZERO = "DivByZero"
INT_OVERFLOW = "IntegerOverflow"
INDIRECT_MISMATCH = "IndirectCallMismatch"
STACK_EXHAUSTED = "CallStackExhausted"
UNINIT_TABLE = "UninitializedTableEntry"


class UnsupportedImport(WasmError):
    def __init__(self, name: str):
        super().__init__(f"unsupported import: {name}")
        self.name = name


class InstantiationTrap(WasmError):
    pass


class AccessorMissing(WasmError):
    pass


class AccessorOutOfBounds(WasmError):
    pass


class InvalidModule(WasmError):
    pass


class NoEntryPoint(WasmError):
    pass


@dataclass
class RunLimits:
    fuel: int = 50_000_000
    max_pages: int = 1024
    max_call_depth: int = 10_000


@dataclass
class WasiConfig:
    argv: list[str] = field(default_factory=lambda: ["prog"])
    env: dict[str, str] = field(default_factory=dict)
    stdin: bytes = b""
    rng_seed: int = 0


@dataclass
class ExecOutcome:
    status: str  # "exit" | "trap" | "fuel-exhausted"
    exit_code: int = 0
    trap_kind: str = ""
    trap_function: int = -1
    trap_offset: int = -1
    stdout: bytes = b""
    stderr: bytes = b""
    instructions_executed: int = 0

    @property
    def is_trap(self) -> bool:
        return self.status == "trap"


@dataclass(frozen=True)
class CrashClass:
    kind: str  # "stack-canary" | "heap-underflow" | "heap-overflow" |
    #            "builtin" | "none"
    detail: str = ""

    @property
    def is_crash(self) -> bool:
        return self.kind != "none"


def classify_crash(outcome: ExecOutcome, sites: SiteTable | None) -> CrashClass:
    """Attribute a run outcome to an oracle, a built-in trap, or nothing.

    Normal exits (any code) and fuel exhaustion are not crashes.
    """
    if outcome.status != "trap":
        return CrashClass("none")
    if outcome.trap_kind == UNREACHABLE and sites is not None:
        site = sites.lookup(outcome.trap_function, outcome.trap_offset)
        if site is not None and site.kind in (
            "stack-canary", "heap-underflow", "heap-overflow"
        ):
            return CrashClass(site.kind, detail=UNREACHABLE)
    return CrashClass("builtin", detail=outcome.trap_kind)


# ---------------------------------------------------------------------------
# internal signals

class _Trap(Exception):
    def __init__(self, kind: str, func: int = -1, offset: int = -1):
        self.kind = kind
        self.func = func
        self.offset = offset


class _ProcExit(Exception):
    def __init__(self, code: int):
        self.code = code


class _Fuel(Exception):
    pass


class _NumTrap(Exception):
    def __init__(self, kind: str):
        self.kind = kind


# ---------------------------------------------------------------------------
# numeric helpers

def _s32(v):
    return v - 0x1_0000_0000 if v & 0x8000_0000 else v


def _s64(v):
    return v - 0x1_0000_0000_0000_0000 if v & 0x8000_0000_0000_0000 else v


def _f32(x: float) -> float:
    try:
        return struct.unpack("<f", struct.pack("<f", x))[0]
    except OverflowError:
        return math.inf if x > 0 else -math.inf


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _div_s(a, b, bits):
    sa, sb = (_s32(a), _s32(b)) if bits == 32 else (_s64(a), _s64(b))
    if sb == 0:
        raise _NumTrap(DIV_ZERO)
    q = _trunc_div(sa, sb)
    if q == 1 << (bits - 1):
        raise _NumTrap(INT_OVERFLOW)
    return q & (M32 if bits == 32 else M64)


def _rem_s(a, b, bits):
    sa, sb = (_s32(a), _s32(b)) if bits == 32 else (_s64(a), _s64(b))
    if sb == 0:
        raise _NumTrap(DIV_ZERO)
    r = sa - sb * _trunc_div(sa, sb)
    return r & (M32 if bits == 32 else M64)


def _div_u(a, b):
    if b == 0:
        raise _NumTrap(DIV_ZERO)
    return a // b


def _rem_u(a, b):
    if b == 0:
        raise _NumTrap(DIV_ZERO)
    return a % b


def _clz(v, bits):
    return bits - v.bit_length()


def _ctz(v, bits):
    return (v & -v).bit_length() - 1 if v else bits


def _rotl(a, n, bits, mask):
    n %= bits
    return ((a << n) | (a >> (bits - n))) & mask


def _rotr(a, n, bits, mask):
    n %= bits
    return ((a >> n) | (a << (bits - n))) & mask


def _fmin(a, b):
    if math.isnan(a) or math.isnan(b):
        return math.nan
    if a == b == 0.0:  # -0 < +0 per IEEE minimum
        return -0.0 if math.copysign(1, a) < 0 or math.copysign(1, b) < 0 else 0.0
    return a if a < b else b


def _fmax(a, b):
    if math.isnan(a) or math.isnan(b):
        return math.nan
    if a == b == 0.0:
        return 0.0 if math.copysign(1, a) > 0 or math.copysign(1, b) > 0 else -0.0
    return a if a > b else b


def _fceil(x):
    if math.isnan(x) or math.isinf(x) or x == 0.0:
        return x
    return float(math.ceil(x))


def _ffloor(x):
    if math.isnan(x) or math.isinf(x) or x == 0.0:
        return x
    return float(math.floor(x))


def _ftrunc(x):
    if math.isnan(x) or math.isinf(x) or x == 0.0:
        return x
    return float(math.trunc(x))


def _fnearest(x):
    if math.isnan(x) or math.isinf(x) or x == 0.0:
        return x
    r = float(round(x))
    return math.copysign(r, x) if r == 0.0 else r


def _fsqrt(x):
    if math.isnan(x) or x < 0:
        return math.nan
    if x == 0.0:
        return x
    return math.sqrt(x)


def _trunc_to_int(x: float, lo: int, hi: int) -> int:
    if math.isnan(x) or math.isinf(x):
        raise _NumTrap(INT_OVERFLOW)
    t = math.trunc(x)
    if not lo <= t <= hi:
        raise _NumTrap(INT_OVERFLOW)
    return t


def _build_numeric() -> dict[str, tuple[int, object]]:
    """opname -> (arity, fn on stored representations)."""
    ops: dict[str, tuple[int, object]] = {}

    def u(name, fn):
        ops[name] = (1, fn)

    def b(name, fn):
        ops[name] = (2, fn)

    for bits, mask, sx in ((32, M32, _s32), (64, M64, _s64)):
        p = f"i{bits}"
        u(f"{p}.eqz", lambda a: 1 if a == 0 else 0)
        b(f"{p}.eq", lambda a, c: 1 if a == c else 0)
        b(f"{p}.ne", lambda a, c: 1 if a != c else 0)
        b(f"{p}.lt_s", lambda a, c, s=sx: 1 if s(a) < s(c) else 0)
        b(f"{p}.lt_u", lambda a, c: 1 if a < c else 0)
        b(f"{p}.gt_s", lambda a, c, s=sx: 1 if s(a) > s(c) else 0)
        b(f"{p}.gt_u", lambda a, c: 1 if a > c else 0)
        b(f"{p}.le_s", lambda a, c, s=sx: 1 if s(a) <= s(c) else 0)
        b(f"{p}.le_u", lambda a, c: 1 if a <= c else 0)
        b(f"{p}.ge_s", lambda a, c, s=sx: 1 if s(a) >= s(c) else 0)
        b(f"{p}.ge_u", lambda a, c: 1 if a >= c else 0)
        u(f"{p}.clz", lambda a, n=bits: _clz(a, n))
        u(f"{p}.ctz", lambda a, n=bits: _ctz(a, n))
        u(f"{p}.popcnt", lambda a: a.bit_count())
        b(f"{p}.add", lambda a, c, m=mask: (a + c) & m)
        b(f"{p}.sub", lambda a, c, m=mask: (a - c) & m)
        b(f"{p}.mul", lambda a, c, m=mask: (a * c) & m)
        b(f"{p}.div_s", lambda a, c, n=bits: _div_s(a, c, n))
        b(f"{p}.div_u", lambda a, c: _div_u(a, c))
        b(f"{p}.rem_s", lambda a, c, n=bits: _rem_s(a, c, n))
        b(f"{p}.rem_u", lambda a, c: _rem_u(a, c))
        b(f"{p}.and", lambda a, c: a & c)
        b(f"{p}.or", lambda a, c: a | c)
        b(f"{p}.xor", lambda a, c: a ^ c)
        b(f"{p}.shl", lambda a, c, n=bits, m=mask: (a << (c % n)) & m)
        b(f"{p}.shr_u", lambda a, c, n=bits: a >> (c % n))
        b(f"{p}.shr_s",
          lambda a, c, n=bits, m=mask, s=sx: (s(a) >> (c % n)) & m)
        b(f"{p}.rotl", lambda a, c, n=bits, m=mask: _rotl(a, c, n, m))
        b(f"{p}.rotr", lambda a, c, n=bits, m=mask: _rotr(a, c, n, m))

    for p, narrow in (("f32", _f32), ("f64", float)):
        b(f"{p}.eq", lambda a, c: 1 if a == c else 0)
        b(f"{p}.ne", lambda a, c: 1 if a != c else 0)
        b(f"{p}.lt", lambda a, c: 1 if a < c else 0)
        b(f"{p}.gt", lambda a, c: 1 if a > c else 0)
        b(f"{p}.le", lambda a, c: 1 if a <= c else 0)
        b(f"{p}.ge", lambda a, c: 1 if a >= c else 0)
        u(f"{p}.abs", lambda a, w=narrow: w(abs(a)))
        u(f"{p}.neg", lambda a, w=narrow: w(-a))
        u(f"{p}.ceil", lambda a, w=narrow: w(_fceil(a)))
        u(f"{p}.floor", lambda a, w=narrow: w(_ffloor(a)))
        u(f"{p}.trunc", lambda a, w=narrow: w(_ftrunc(a)))
        u(f"{p}.nearest", lambda a, w=narrow: w(_fnearest(a)))
        u(f"{p}.sqrt", lambda a, w=narrow: w(_fsqrt(a)))
        b(f"{p}.add", lambda a, c, w=narrow: w(a + c))
        b(f"{p}.sub", lambda a, c, w=narrow: w(a - c))
        b(f"{p}.mul", lambda a, c, w=narrow: w(a * c))
        b(f"{p}.div",
          lambda a, c, w=narrow: w(_fdiv(a, c)))
        b(f"{p}.min", lambda a, c, w=narrow: w(_fmin(a, c)))
        b(f"{p}.max", lambda a, c, w=narrow: w(_fmax(a, c)))
        b(f"{p}.copysign", lambda a, c, w=narrow: w(math.copysign(a, c)))

    u("i32.wrap_i64", lambda a: a & M32)
    u("i32.trunc_f32_s",
      lambda a: _trunc_to_int(a, -(1 << 31), (1 << 31) - 1) & M32)
    u("i32.trunc_f32_u", lambda a: _trunc_to_int(a, 0, M32))
    u("i32.trunc_f64_s",
      lambda a: _trunc_to_int(a, -(1 << 31), (1 << 31) - 1) & M32)
    u("i32.trunc_f64_u", lambda a: _trunc_to_int(a, 0, M32))
    u("i64.extend_i32_s", lambda a: _s32(a) & M64)
    u("i64.extend_i32_u", lambda a: a)
    u("i64.trunc_f32_s",
      lambda a: _trunc_to_int(a, -(1 << 63), (1 << 63) - 1) & M64)
    u("i64.trunc_f32_u", lambda a: _trunc_to_int(a, 0, M64))
    u("i64.trunc_f64_s",
      lambda a: _trunc_to_int(a, -(1 << 63), (1 << 63) - 1) & M64)
    u("i64.trunc_f64_u", lambda a: _trunc_to_int(a, 0, M64))
    u("f32.convert_i32_s", lambda a: _f32(float(_s32(a))))
    u("f32.convert_i32_u", lambda a: _f32(float(a)))
    u("f32.convert_i64_s", lambda a: _f32(float(_s64(a))))
    u("f32.convert_i64_u", lambda a: _f32(float(a)))
    u("f32.demote_f64", lambda a: _f32(a))
    u("f64.convert_i32_s", lambda a: float(_s32(a)))
    u("f64.convert_i32_u", lambda a: float(a))
    u("f64.convert_i64_s", lambda a: float(_s64(a)))
    u("f64.convert_i64_u", lambda a: float(a))
    u("f64.promote_f32", lambda a: a)
    u("i32.reinterpret_f32",
      lambda a: struct.unpack("<I", struct.pack("<f", a))[0])
    u("i64.reinterpret_f64",
      lambda a: struct.unpack("<Q", struct.pack("<d", a))[0])
    u("f32.reinterpret_i32",
      lambda a: struct.unpack("<f", struct.pack("<I", a))[0])
    u("f64.reinterpret_i64",
      lambda a: struct.unpack("<d", struct.pack("<Q", a))[0])
    return ops


def _fdiv(a, b):
    if b == 0.0:
        if math.isnan(a) or a == 0.0:
            return math.nan
        sign = math.copysign(1, a) * math.copysign(1, b)
        return math.inf if sign > 0 else -math.inf
    return a / b


_NUMERIC = _build_numeric()

# compiled instruction codes
C_UNREACHABLE = 0
C_NOP = 1
C_BLOCK = 2
C_LOOP = 3
C_IF = 4
C_ELSE = 5
C_END = 6
C_BR = 7
C_BR_IF = 8
C_BR_TABLE = 9
C_RETURN = 10
C_CALL = 11
C_CALL_INDIRECT = 12
C_DROP = 13
C_SELECT = 14
C_LOCAL_GET = 15
C_LOCAL_SET = 16
C_LOCAL_TEE = 17
C_GLOBAL_GET = 18
C_GLOBAL_SET = 19
C_LOAD = 20
C_STORE = 21
C_MEMSIZE = 22
C_MEMGROW = 23
C_CONST = 24
C_NUM1 = 25
C_NUM2 = 26
C_MEMFILL = 27

_LOAD_INFO = {
    # op -> (width, signed, kind)
    "i32.load": (4, False, "i32"), "i64.load": (8, False, "i64"),
    "f32.load": (4, False, "f32"), "f64.load": (8, False, "f64"),
    "i32.load8_s": (1, True, "i32"), "i32.load8_u": (1, False, "i32"),
    "i32.load16_s": (2, True, "i32"), "i32.load16_u": (2, False, "i32"),
    "i64.load8_s": (1, True, "i64"), "i64.load8_u": (1, False, "i64"),
    "i64.load16_s": (2, True, "i64"), "i64.load16_u": (2, False, "i64"),
    "i64.load32_s": (4, True, "i64"), "i64.load32_u": (4, False, "i64"),
}

_STORE_INFO = {
    "i32.store": (4, "i32"), "i64.store": (8, "i64"),
    "f32.store": (4, "f32"), "f64.store": (8, "f64"),
    "i32.store8": (1, "i32"), "i32.store16": (2, "i32"),
    "i64.store8": (1, "i64"), "i64.store16": (2, "i64"),
    "i64.store32": (4, "i64"),
}

_DEFAULT = {"i32": 0, "i64": 0, "f32": 0.0, "f64": 0.0}


class _FuncMeta:
    __slots__ = ("func_idx", "nparams", "nresults", "param_types",
                 "local_defaults", "code")

    def __init__(self, func_idx, ftype: FuncType, local_types, code):
        self.func_idx = func_idx
        self.nparams = len(ftype.params)
        self.nresults = len(ftype.results)
        self.param_types = ftype.params
        self.local_defaults = [_DEFAULT[t] for t in local_types]
        self.code = code


def _compile_body(body) -> list[tuple]:
    """Flat body -> compiled tuples with jump targets resolved."""
    n = len(body)
    # match structured instructions
    end_of = {}
    else_of = {}
    stack = []
    for pc, instr in enumerate(body):
        op = instr.op
        if op in ("block", "loop", "if"):
            stack.append(pc)
        elif op == "else":
            else_of[stack[-1]] = pc
        elif op == "end":
            if stack:
                end_of[stack.pop()] = pc
            # terminal end of the function matches the implicit frame

    code: list[tuple] = []
    for pc, instr in enumerate(body):
        op = instr.op
        a = instr.args
        if op == "unreachable":
            code.append((C_UNREACHABLE,))
        elif op == "nop":
            code.append((C_NOP,))
        elif op == "block":
            arity = 0 if a[0] is None else 1
            code.append((C_BLOCK, end_of[pc], arity))
        elif op == "loop":
            code.append((C_LOOP,))
        elif op == "if":
            arity = 0 if a[0] is None else 1
            end = end_of[pc]
            epc = else_of.get(pc)
            jump_false = end if epc is None else epc + 1
            code.append((C_IF, jump_false, end, arity))
        elif op == "else":
            # reaching else means the then-branch finished
            end = None
            for start, e in else_of.items():
                if e == pc:
                    end = end_of[start]
                    break
            code.append((C_ELSE, end))
        elif op == "end":
            code.append((C_END,))
        elif op == "br":
            code.append((C_BR, a[0]))
        elif op == "br_if":
            code.append((C_BR_IF, a[0]))
        elif op == "br_table":
            code.append((C_BR_TABLE, a[0], a[1]))
        elif op == "return":
            code.append((C_RETURN,))
        elif op == "call":
            code.append((C_CALL, a[0]))
        elif op == "call_indirect":
            code.append((C_CALL_INDIRECT, a[0]))
        elif op == "drop":
            code.append((C_DROP,))
        elif op == "select":
            code.append((C_SELECT,))
        elif op == "local.get":
            code.append((C_LOCAL_GET, a[0]))
        elif op == "local.set":
            code.append((C_LOCAL_SET, a[0]))
        elif op == "local.tee":
            code.append((C_LOCAL_TEE, a[0]))
        elif op == "global.get":
            code.append((C_GLOBAL_GET, a[0]))
        elif op == "global.set":
            code.append((C_GLOBAL_SET, a[0]))
        elif op in _LOAD_INFO:
            width, signed, kind = _LOAD_INFO[op]
            code.append((C_LOAD, a[1], width, signed, kind))
        elif op in _STORE_INFO:
            width, kind = _STORE_INFO[op]
            code.append((C_STORE, a[1], width, kind))
        elif op == "memory.size":
            code.append((C_MEMSIZE,))
        elif op == "memory.grow":
            code.append((C_MEMGROW,))
        elif op == "i32.const":
            code.append((C_CONST, a[0] & M32))
        elif op == "i64.const":
            code.append((C_CONST, a[0] & M64))
        elif op == "f32.const":
            code.append(
                (C_CONST, struct.unpack("<f", a[0].to_bytes(4, "little"))[0])
            )
        elif op == "f64.const":
            code.append(
                (C_CONST, struct.unpack("<d", a[0].to_bytes(8, "little"))[0])
            )
        else:
            arity, fn = _NUMERIC[op]
            code.append((C_NUM1 if arity == 1 else C_NUM2, fn))

    _apply_fill_peephole(body, code)
    return code


_FILL_SHAPE = (
    "i32.const", "local.set", "loop", "local.get", "i64.const", "i64.store",
    "local.get", "i32.const", "i32.add", "local.tee", "i32.const",
    "i32.lt_u", "br_if", "end",
)


def _apply_fill_peephole(body, code):
    """Replace the canonical zero-fill loop with a bulk-fill step.

    The loop the coverage pass emits to clear the trace-bits region would
    otherwise cost ~90k interpreted instructions per run. The replacement
    is observationally identical: same memory effect, same final local
    value, and fuel is charged as if every iteration had run.
    """
    n = len(body)
    i = 0
    while i + len(_FILL_SHAPE) <= n:
        if all(body[i + k].op == _FILL_SHAPE[k]
               for k in range(len(_FILL_SHAPE))):
            start = body[i].args[0] & M32
            local_a = body[i + 1].args[0]
            local_b = body[i + 3].args[0]
            zero = body[i + 4].args[0]
            step = body[i + 7].args[0]
            local_c = body[i + 9].args[0]
            end = body[i + 10].args[0] & M32
            br_depth = body[i + 12].args[0]
            if (local_a == local_b == local_c and zero == 0 and step == 8
                    and br_depth == 0 and end > start
                    and (end - start) % 8 == 0):
                iters = (end - start) // 8
                cost = 2 + 11 * iters + 1
                code[i] = (
                    C_MEMFILL, start, end, local_a, cost,
                    i + len(_FILL_SHAPE), i + 5,
                )
            i += len(_FILL_SHAPE)
        else:
            i += 1


_WASI_MODULE = "wasi_snapshot_preview1"

_WASI_SIGS = {
    "args_get": FuncType(("i32", "i32"), ("i32",)),
    "args_sizes_get": FuncType(("i32", "i32"), ("i32",)),
    "environ_get": FuncType(("i32", "i32"), ("i32",)),
    "environ_sizes_get": FuncType(("i32", "i32"), ("i32",)),
    "fd_read": FuncType(("i32", "i32", "i32", "i32"), ("i32",)),
    "fd_write": FuncType(("i32", "i32", "i32", "i32"), ("i32",)),
    "fd_close": FuncType(("i32",), ("i32",)),
    "fd_seek": FuncType(("i32", "i64", "i32", "i32"), ("i32",)),
    "fd_fdstat_get": FuncType(("i32", "i32"), ("i32",)),
    "proc_exit": FuncType(("i32",), ()),
    "random_get": FuncType(("i32", "i32"), ("i32",)),
    "clock_time_get": FuncType(("i32", "i64", "i32"), ("i32",)),
}

ERRNO_SUCCESS = 0
ERRNO_BADF = 8
ERRNO_SPIPE = 29


class Instance:
    """One isolated instantiation: memory, globals, WASI state."""

    def __init__(self, engine: "Engine", wasi: WasiConfig):
        self.engine = engine
        self.wasi = wasi
        m = engine.module
        min_pages = m.memory[0] if m.memory else 0
        self.memory = bytearray(min_pages * PAGE)
        self.mem_max = m.memory[1] if m.memory else 0
        self.globals = [engine.eval_const(g.init) for g in m.globals]
        self.stdout = bytearray()
        self.stderr = bytearray()
        self.rng = random.Random(wasi.rng_seed)
        self.clock = 0
        self.start_ran = False
        for seg in m.data_segments:
            off = engine.eval_const(seg.offset)
            if off + len(seg.data) > len(self.memory):
                raise InstantiationTrap(
                    f"data segment [{off}, {off + len(seg.data)}) out of "
                    f"bounds for {len(self.memory)}-byte memory"
                )
            self.memory[off: off + len(seg.data)] = seg.data

    # memory helpers used by host calls
    def mem_read(self, addr: int, n: int) -> bytes:
        if addr + n > len(self.memory) or addr < 0:
            raise _Trap(MEM_OOB)
        return bytes(self.memory[addr: addr + n])

    def mem_write(self, addr: int, data: bytes):
        if addr + len(data) > len(self.memory) or addr < 0:
            raise _Trap(MEM_OOB)
        self.memory[addr: addr + len(data)] = data

    def read_u32(self, addr: int) -> int:
        return int.from_bytes(self.mem_read(addr, 4), "little")

    def write_u32(self, addr: int, value: int):
        self.mem_write(addr, (value & M32).to_bytes(4, "little"))

    def write_u64(self, addr: int, value: int):
        self.mem_write(addr, (value & M64).to_bytes(8, "little"))


def _iovs(inst: Instance, ptr: int, count: int):
    for k in range(count):
        base = ptr + 8 * k
        yield inst.read_u32(base), inst.read_u32(base + 4)


def _wasi_args_sizes_get(inst, argc_ptr, size_ptr):
    argv = inst.wasi.argv
    inst.write_u32(argc_ptr, len(argv))
    inst.write_u32(size_ptr, sum(len(a.encode()) + 1 for a in argv))
    return ERRNO_SUCCESS


def _wasi_args_get(inst, argv_ptr, buf_ptr):
    for i, arg in enumerate(inst.wasi.argv):
        raw = arg.encode() + b"\x00"
        inst.write_u32(argv_ptr + 4 * i, buf_ptr)
        inst.mem_write(buf_ptr, raw)
        buf_ptr += len(raw)
    return ERRNO_SUCCESS


def _wasi_environ_sizes_get(inst, count_ptr, size_ptr):
    entries = [f"{k}={v}" for k, v in inst.wasi.env.items()]
    inst.write_u32(count_ptr, len(entries))
    inst.write_u32(size_ptr, sum(len(e.encode()) + 1 for e in entries))
    return ERRNO_SUCCESS


def _wasi_environ_get(inst, env_ptr, buf_ptr):
    for i, (k, v) in enumerate(inst.wasi.env.items()):
        raw = f"{k}={v}".encode() + b"\x00"
        inst.write_u32(env_ptr + 4 * i, buf_ptr)
        inst.mem_write(buf_ptr, raw)
        buf_ptr += len(raw)
    return ERRNO_SUCCESS


def _wasi_fd_read(inst, fd, iovs_ptr, iovs_len, nread_ptr):
    if fd != 0:
        return ERRNO_BADF
    total = 0
    for buf, blen in _iovs(inst, iovs_ptr, iovs_len):
        chunk = inst.wasi.stdin[inst.stdin_pos: inst.stdin_pos + blen]
        if chunk:
            inst.mem_write(buf, chunk)
            inst.stdin_pos += len(chunk)
            total += len(chunk)
        if len(chunk) < blen:
            break
    inst.write_u32(nread_ptr, total)
    return ERRNO_SUCCESS


def _wasi_fd_write(inst, fd, iovs_ptr, iovs_len, nwritten_ptr):
    if fd == 1:
        sink = inst.stdout
    elif fd == 2:
        sink = inst.stderr
    else:
        return ERRNO_BADF
    total = 0
    for buf, blen in _iovs(inst, iovs_ptr, iovs_len):
        sink.extend(inst.mem_read(buf, blen))
        total += blen
    inst.write_u32(nwritten_ptr, total)
    return ERRNO_SUCCESS


def _wasi_fd_close(inst, fd):
    return ERRNO_SUCCESS if fd in (0, 1, 2) else ERRNO_BADF


def _wasi_fd_seek(inst, fd, offset, whence, new_ptr):
    return ERRNO_SPIPE if fd in (0, 1, 2) else ERRNO_BADF


def _wasi_fd_fdstat_get(inst, fd, buf_ptr):
    if fd not in (0, 1, 2):
        return ERRNO_BADF
    stat = bytearray(24)
    stat[0] = 2  # character device
    inst.mem_write(buf_ptr, bytes(stat))
    return ERRNO_SUCCESS


def _wasi_proc_exit(inst, code):
    raise _ProcExit(_s32(code))


def _wasi_random_get(inst, buf, n):
    inst.mem_write(buf, bytes(inst.rng.getrandbits(8) for _ in range(n)))
    return ERRNO_SUCCESS


def _wasi_clock_time_get(inst, clock_id, precision, time_ptr):
    # deterministic: a fixed epoch advanced by host-call count
    inst.clock += 1000
    inst.write_u64(time_ptr, 1_600_000_000_000_000_000 + inst.clock)
    return ERRNO_SUCCESS


_WASI_IMPL = {
    "args_get": _wasi_args_get,
    "args_sizes_get": _wasi_args_sizes_get,
    "environ_get": _wasi_environ_get,
    "environ_sizes_get": _wasi_environ_sizes_get,
    "fd_read": _wasi_fd_read,
    "fd_write": _wasi_fd_write,
    "fd_close": _wasi_fd_close,
    "fd_seek": _wasi_fd_seek,
    "fd_fdstat_get": _wasi_fd_fdstat_get,
    "proc_exit": _wasi_proc_exit,
    "random_get": _wasi_random_get,
    "clock_time_get": _wasi_clock_time_get,
}


class Engine:
    """Compile-once wrapper around a module: validate, preprocess bodies,
    resolve imports; instances are then cheap to create."""

    def __init__(self, module: ModuleIR, validate: bool = True):
        self.module = module
        if validate:
            report = validate_module(module)
            if not report.ok:
                raise InvalidModule(str(report))

        self.host_funcs = []
        for im in module.imports:
            if im.kind != "func":
                raise UnsupportedImport(
                    f"{im.module}.{im.name} ({im.kind} import)"
                )
            if im.module != _WASI_MODULE or im.name not in _WASI_IMPL:
                raise UnsupportedImport(f"{im.module}.{im.name}")
            expected = _WASI_SIGS[im.name]
            if module.types[im.desc] != expected:
                raise UnsupportedImport(
                    f"{im.module}.{im.name}: signature mismatch"
                )
            self.host_funcs.append(
                (_WASI_IMPL[im.name], len(expected.params),
                 len(expected.results))
            )

        n_host = len(self.host_funcs)
        self.metas: list[_FuncMeta] = []
        for i, f in enumerate(module.functions):
            ftype = module.types[f.type_idx]
            self.metas.append(
                _FuncMeta(n_host + i, ftype, f.locals, _compile_body(f.body))
            )

        self.table: list[Optional[int]] = []
        if module.table is not None:
            self.table = [None] * module.table[0]
            for elem in module.elems:
                off = self.eval_const(elem.offset)
                if off + len(elem.func_indices) > len(self.table):
                    raise InstantiationTrap("element segment out of bounds")
                for k, fi in enumerate(elem.func_indices):
                    self.table[off + k] = fi

        self.exports = module.export_map()
        self.n_host = n_host

    def eval_const(self, expr) -> int | float:
        instr = expr[0]
        if instr.op == "i32.const":
            return instr.args[0] & M32
        if instr.op == "i64.const":
            return instr.args[0] & M64
        if instr.op == "f32.const":
            return struct.unpack("<f", instr.args[0].to_bytes(4, "little"))[0]
        if instr.op == "f64.const":
            return struct.unpack("<d", instr.args[0].to_bytes(8, "little"))[0]
        raise InstantiationTrap(f"unsupported constant init {instr.op}")

    def instantiate(self, wasi: WasiConfig | None = None) -> Instance:
        inst = Instance(self, wasi or WasiConfig())
        inst.stdin_pos = 0
        return inst

    # ------------------------------------------------------------------
    def run_start(self, inst: Instance,
                  limits: RunLimits | None = None) -> ExecOutcome:
        """Run the entry point: module start function (if any) then the
        exported ``_start``."""
        limits = limits or RunLimits()
        exp = self.exports.get("_start")
        if exp is None or exp.kind != "func":
            raise NoEntryPoint("module does not export a _start function")
        executed = 0
        try:
            if self.module.start is not None and not inst.start_ran:
                inst.start_ran = True
                _, executed = self._invoke(
                    inst, self.module.start, [], limits, executed
                )
            _, executed = self._invoke(inst, exp.index, [], limits, executed)
            status = ExecOutcome("exit", exit_code=0)
        except _ProcExit as e:
            status = ExecOutcome("exit", exit_code=e.code)
            executed = self._last_executed
        except _Trap as t:
            status = ExecOutcome(
                "trap", trap_kind=t.kind, trap_function=t.func,
                trap_offset=t.offset,
            )
            executed = self._last_executed
        except _Fuel:
            status = ExecOutcome("fuel-exhausted")
            executed = limits.fuel
        status.stdout = bytes(inst.stdout)
        status.stderr = bytes(inst.stderr)
        status.instructions_executed = executed
        return status

    def call_export(self, inst: Instance, name: str, args: list,
                    limits: RunLimits | None = None
                    ) -> tuple[ExecOutcome, list]:
        """Invoke an exported function directly; used by tests and tools."""
        limits = limits or RunLimits()
        exp = self.exports.get(name)
        if exp is None or exp.kind != "func":
            raise NoEntryPoint(f"no exported function {name!r}")
        try:
            results, executed = self._invoke(inst, exp.index, args, limits, 0)
            outcome = ExecOutcome("exit", exit_code=0)
        except _ProcExit as e:
            outcome, results = ExecOutcome("exit", exit_code=e.code), []
            executed = self._last_executed
        except _Trap as t:
            outcome = ExecOutcome(
                "trap", trap_kind=t.kind, trap_function=t.func,
                trap_offset=t.offset,
            )
            results, executed = [], self._last_executed
        except _Fuel:
            outcome, results = ExecOutcome("fuel-exhausted"), []
            executed = limits.fuel
        outcome.stdout = bytes(inst.stdout)
        outcome.stderr = bytes(inst.stderr)
        outcome.instructions_executed = executed
        return outcome, results

    def read_trace_bits(self, inst: Instance) -> bytes:
        if ACCESSOR_EXPORT not in self.exports:
            raise AccessorMissing(
                f"module does not export {ACCESSOR_EXPORT}"
            )
        outcome, results = self.call_export(
            inst, ACCESSOR_EXPORT, [], RunLimits(fuel=1000)
        )
        if outcome.status != "exit" or not results:
            raise AccessorMissing("trace-bits accessor failed to run")
        base = results[0]
        if base + TRACE_BITS_SIZE > len(inst.memory):
            raise AccessorOutOfBounds(
                f"accessor returned {base}, memory is {len(inst.memory)} bytes"
            )
        return bytes(inst.memory[base: base + TRACE_BITS_SIZE])

    # ------------------------------------------------------------------
    def _invoke(self, inst: Instance, func_idx: int, args: list,
                limits: RunLimits, executed: int):
        self._last_executed = executed
        if func_idx < self.n_host:
            raise NoEntryPoint("cannot invoke an imported function directly")
        meta = self.metas[func_idx - self.n_host]
        if len(args) != meta.nparams:
            raise NoEntryPoint(
                f"function expects {meta.nparams} args, got {len(args)}"
            )
        return self._run(inst, meta, list(args), limits, executed)

    def _run(self, inst: Instance, meta: _FuncMeta, args: list,
             limits: RunLimits, executed: int):
        fuel = limits.fuel
        max_depth = limits.max_call_depth
        max_pages = limits.max_pages
        mem = inst.memory
        glb = inst.globals
        metas = self.metas
        n_host = self.n_host
        host_funcs = self.host_funcs
        table = self.table

        vals: list = []
        frames: list = []
        code = meta.code
        pc = 0
        locals_ = args + list(meta.local_defaults)
        labels: list = []
        base = 0
        nresults = meta.nresults
        func_idx = meta.func_idx

        def trap(kind):
            self._last_executed = executed
            raise _Trap(kind, func_idx, pc)

        try:
            while True:
                if executed >= fuel:
                    self._last_executed = fuel
                    raise _Fuel()
                executed += 1
                ins = code[pc]
                c = ins[0]

                if c == C_LOCAL_GET:
                    vals.append(locals_[ins[1]])
                elif c == C_CONST:
                    vals.append(ins[1])
                elif c == C_NUM2:
                    b = vals.pop()
                    a = vals[-1]
                    try:
                        vals[-1] = ins[1](a, b)
                    except _NumTrap as t:
                        trap(t.kind)
                elif c == C_NUM1:
                    try:
                        vals[-1] = ins[1](vals[-1])
                    except _NumTrap as t:
                        trap(t.kind)
                elif c == C_LOCAL_SET:
                    locals_[ins[1]] = vals.pop()
                elif c == C_LOCAL_TEE:
                    locals_[ins[1]] = vals[-1]
                elif c == C_LOAD:
                    addr = vals[-1] + ins[1]
                    width = ins[2]
                    if addr + width > len(mem):
                        trap(MEM_OOB)
                    raw = mem[addr: addr + width]
                    kind = ins[4]
                    if kind == "i32" or kind == "i64":
                        v = int.from_bytes(raw, "little", signed=ins[3])
                        if ins[3]:
                            v &= M32 if kind == "i32" else M64
                        vals[-1] = v
                    elif kind == "f32":
                        vals[-1] = struct.unpack("<f", raw)[0]
                    else:
                        vals[-1] = struct.unpack("<d", raw)[0]
                elif c == C_STORE:
                    v = vals.pop()
                    addr = vals.pop() + ins[1]
                    width = ins[2]
                    if addr + width > len(mem):
                        trap(MEM_OOB)
                    kind = ins[3]
                    if kind == "i32" or kind == "i64":
                        mem[addr: addr + width] = (
                            v & ((1 << (8 * width)) - 1)
                        ).to_bytes(width, "little")
                    elif kind == "f32":
                        mem[addr: addr + 4] = struct.pack("<f", v)
                    else:
                        mem[addr: addr + 8] = struct.pack("<d", v)
                elif c == C_BLOCK:
                    labels.append((ins[1], ins[2], len(vals), False))
                elif c == C_LOOP:
                    labels.append((pc, 0, len(vals), True))
                elif c == C_IF:
                    cond = vals.pop()
                    labels.append((ins[2], ins[3], len(vals), False))
                    if not cond:
                        pc = ins[1]
                        continue
                elif c == C_ELSE:
                    pc = ins[1]
                    continue
                elif c == C_END:
                    if labels:
                        labels.pop()
                    else:
                        # function return
                        if nresults:
                            res = vals[-nresults:]
                            del vals[base:]
                            vals.extend(res)
                        else:
                            del vals[base:]
                        if not frames:
                            self._last_executed = executed
                            return vals, executed
                        (code, pc, locals_, labels, base, nresults,
                         func_idx) = frames.pop()
                        continue
                elif c == C_BR or c == C_BR_IF or c == C_BR_TABLE:
                    if c == C_BR_IF:
                        if not vals.pop():
                            pc += 1
                            continue
                        depth = ins[1]
                    elif c == C_BR:
                        depth = ins[1]
                    else:
                        idx = vals.pop()
                        targets, default = ins[1], ins[2]
                        depth = targets[idx] if idx < len(targets) else default
                    L = len(labels)
                    cont, ar, h, isloop = labels[L - 1 - depth]
                    if ar:
                        vals[h:] = vals[-ar:]
                    else:
                        del vals[h:]
                    if isloop:
                        del labels[L - 1 - depth:]
                    else:
                        del labels[L - depth:]
                    pc = cont
                    continue
                elif c == C_RETURN:
                    if nresults:
                        res = vals[-nresults:]
                        del vals[base:]
                        vals.extend(res)
                    else:
                        del vals[base:]
                    if not frames:
                        self._last_executed = executed
                        return vals, executed
                    (code, pc, locals_, labels, base, nresults,
                     func_idx) = frames.pop()
                    continue
                elif c == C_CALL or c == C_CALL_INDIRECT:
                    if c == C_CALL:
                        target = ins[1]
                    else:
                        elem = vals.pop()
                        if elem >= len(table) or table[elem] is None:
                            trap(UNINIT_TABLE)
                        target = table[elem]
                        expected = self.module.types[ins[1]]
                        if self.module.func_type(target) != expected:
                            trap(INDIRECT_MISMATCH)
                    if target < n_host:
                        fn, nargs, nres = host_funcs[target]
                        if nargs:
                            hargs = vals[-nargs:]
                            del vals[-nargs:]
                        else:
                            hargs = []
                        try:
                            r = fn(inst, *hargs)
                        except _Trap as t:
                            trap(t.kind)
                        if nres:
                            vals.append(r & M32)
                    else:
                        if len(frames) >= max_depth:
                            trap(STACK_EXHAUSTED)
                        tmeta = metas[target - n_host]
                        frames.append(
                            (code, pc + 1, locals_, labels, base,
                             nresults, func_idx)
                        )
                        nargs = tmeta.nparams
                        if nargs:
                            newlocals = vals[-nargs:]
                            del vals[-nargs:]
                        else:
                            newlocals = []
                        newlocals.extend(tmeta.local_defaults)
                        code = tmeta.code
                        pc = 0
                        locals_ = newlocals
                        labels = []
                        base = len(vals)
                        nresults = tmeta.nresults
                        func_idx = tmeta.func_idx
                        continue
                elif c == C_GLOBAL_GET:
                    vals.append(glb[ins[1]])
                elif c == C_GLOBAL_SET:
                    glb[ins[1]] = vals.pop()
                elif c == C_DROP:
                    vals.pop()
                elif c == C_SELECT:
                    cond = vals.pop()
                    b = vals.pop()
                    if not cond:
                        vals[-1] = b
                elif c == C_MEMSIZE:
                    vals.append(len(mem) // PAGE)
                elif c == C_MEMGROW:
                    delta = vals.pop()
                    cur = len(mem) // PAGE
                    new = cur + delta
                    cap = max_pages
                    if inst.mem_max is not None:
                        cap = min(cap, inst.mem_max)
                    if new > cap:
                        vals.append(M32)  # -1
                    else:
                        mem.extend(bytes(delta * PAGE))
                        vals.append(cur)
                elif c == C_MEMFILL:
                    start, end, lidx, cost, skip, store_pc = ins[1:]
                    if end > len(mem):
                        executed += 5  # the instructions before the store
                        pc = store_pc
                        trap(MEM_OOB)
                    if executed - 1 + cost > fuel:
                        self._last_executed = fuel
                        raise _Fuel()
                    mem[start:end] = bytes(end - start)
                    locals_[lidx] = end
                    executed += cost - 1  # this step already counted 1
                    pc = skip
                    continue
                elif c == C_UNREACHABLE:
                    trap(UNREACHABLE)
                elif c == C_NOP:
                    pass
                else:
                    raise AssertionError(f"bad compiled op {c}")
                pc += 1
        except _ProcExit:
            self._last_executed = executed
            raise
