"""Module validation: operand-stack typing, label typing, index bounds.

Findings are collected into a report rather than raised, so a caller can
see every broken function at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ir import FuncType, FunctionIR, Instr, ModuleIR

UNKNOWN = "?"  # bottom type used below unreachable code


@dataclass
class ValidationReport:
    entries: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, msg: str):
        self.entries.append(msg)

    def __str__(self) -> str:
        return "valid" if self.ok else "\n".join(self.entries)


class _Invalid(Exception):
    pass


def _build_sigs() -> dict[str, tuple[tuple[str, ...], tuple[str, ...]]]:
    sigs: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {}
    for t in ("i32", "i64"):
        sigs[f"{t}.eqz"] = ((t,), ("i32",))
        for op in ("eq", "ne", "lt_s", "lt_u", "gt_s", "gt_u",
                   "le_s", "le_u", "ge_s", "ge_u"):
            sigs[f"{t}.{op}"] = ((t, t), ("i32",))
        for op in ("clz", "ctz", "popcnt"):
            sigs[f"{t}.{op}"] = ((t,), (t,))
        for op in ("add", "sub", "mul", "div_s", "div_u", "rem_s", "rem_u",
                   "and", "or", "xor", "shl", "shr_s", "shr_u",
                   "rotl", "rotr"):
            sigs[f"{t}.{op}"] = ((t, t), (t,))
    for t in ("f32", "f64"):
        for op in ("eq", "ne", "lt", "gt", "le", "ge"):
            sigs[f"{t}.{op}"] = ((t, t), ("i32",))
        for op in ("abs", "neg", "ceil", "floor", "trunc",
                   "nearest", "sqrt"):
            sigs[f"{t}.{op}"] = ((t,), (t,))
        for op in ("add", "sub", "mul", "div", "min", "max", "copysign"):
            sigs[f"{t}.{op}"] = ((t, t), (t,))
    for t in ("i32", "i64", "f32", "f64"):
        sigs[f"{t}.const"] = ((), (t,))
    conversions = {
        "i32.wrap_i64": ("i64", "i32"),
        "i32.trunc_f32_s": ("f32", "i32"),
        "i32.trunc_f32_u": ("f32", "i32"),
        "i32.trunc_f64_s": ("f64", "i32"),
        "i32.trunc_f64_u": ("f64", "i32"),
        "i64.extend_i32_s": ("i32", "i64"),
        "i64.extend_i32_u": ("i32", "i64"),
        "i64.trunc_f32_s": ("f32", "i64"),
        "i64.trunc_f32_u": ("f32", "i64"),
        "i64.trunc_f64_s": ("f64", "i64"),
        "i64.trunc_f64_u": ("f64", "i64"),
        "f32.convert_i32_s": ("i32", "f32"),
        "f32.convert_i32_u": ("i32", "f32"),
        "f32.convert_i64_s": ("i64", "f32"),
        "f32.convert_i64_u": ("i64", "f32"),
        "f32.demote_f64": ("f64", "f32"),
        "f64.convert_i32_s": ("i32", "f64"),
        "f64.convert_i32_u": ("i32", "f64"),
        "f64.convert_i64_s": ("i64", "f64"),
        "f64.convert_i64_u": ("i64", "f64"),
        "f64.promote_f32": ("f32", "f64"),
        "i32.reinterpret_f32": ("f32", "i32"),
        "i64.reinterpret_f64": ("f64", "i64"),
        "f32.reinterpret_i32": ("i32", "f32"),
        "f64.reinterpret_i64": ("i64", "f64"),
    }
    for name, (src, dst) in conversions.items():
        sigs[name] = ((src,), (dst,))
    return sigs


_SIGS = _build_sigs()

_LOADS = {
    "i32.load": ("i32", 4), "i64.load": ("i64", 8),
    "f32.load": ("f32", 4), "f64.load": ("f64", 8),
    "i32.load8_s": ("i32", 1), "i32.load8_u": ("i32", 1),
    "i32.load16_s": ("i32", 2), "i32.load16_u": ("i32", 2),
    "i64.load8_s": ("i64", 1), "i64.load8_u": ("i64", 1),
    "i64.load16_s": ("i64", 2), "i64.load16_u": ("i64", 2),
    "i64.load32_s": ("i64", 4), "i64.load32_u": ("i64", 4),
}

_STORES = {
    "i32.store": ("i32", 4), "i64.store": ("i64", 8),
    "f32.store": ("f32", 4), "f64.store": ("f64", 8),
    "i32.store8": ("i32", 1), "i32.store16": ("i32", 2),
    "i64.store8": ("i64", 1), "i64.store16": ("i64", 2),
    "i64.store32": ("i64", 4),
}


class _Frame:
    __slots__ = ("op", "end_types", "height", "unreachable")

    def __init__(self, op: str, end_types: tuple[str, ...], height: int):
        self.op = op
        self.end_types = end_types
        self.height = height
        self.unreachable = False

    def label_types(self) -> tuple[str, ...]:
        # loop labels branch to the header, which takes no values in MVP
        return () if self.op == "loop" else self.end_types


class _FuncChecker:
    def __init__(self, m: ModuleIR, f: FunctionIR, ftype: FuncType):
        self.m = m
        self.f = f
        self.locals = list(ftype.params) + list(f.locals)
        self.results = ftype.results
        self.vals: list[str] = []
        self.ctrls: list[_Frame] = [_Frame("func", ftype.results, 0)]

    def fail(self, msg: str):
        raise _Invalid(msg)

    def push(self, t: str):
        self.vals.append(t)

    def pop(self, expect: str | None = None) -> str:
        frame = self.ctrls[-1]
        if len(self.vals) == frame.height:
            if frame.unreachable:
                return expect or UNKNOWN
            self.fail("operand stack underflow")
        actual = self.vals.pop()
        if expect is not None and actual != expect and actual != UNKNOWN:
            self.fail(f"type mismatch: expected {expect}, got {actual}")
        return actual

    def push_ctrl(self, op: str, end_types: tuple[str, ...]):
        self.ctrls.append(_Frame(op, end_types, len(self.vals)))

    def pop_ctrl(self) -> _Frame:
        if not self.ctrls:
            self.fail("unbalanced end")
        frame = self.ctrls[-1]
        for t in reversed(frame.end_types):
            self.pop(t)
        if len(self.vals) != frame.height:
            self.fail("operand stack not empty at end of block")
        self.ctrls.pop()
        return frame

    def mark_unreachable(self):
        frame = self.ctrls[-1]
        del self.vals[frame.height:]
        frame.unreachable = True

    def label(self, depth: int) -> _Frame:
        if depth >= len(self.ctrls):
            self.fail(f"branch label {depth} out of range")
        return self.ctrls[-1 - depth]

    def check_memarg(self, instr: Instr, natural: int):
        align, _offset = instr.args
        if (1 << align) > natural:
            self.fail(f"{instr.op}: alignment 2^{align} exceeds natural")
        if self.m.memory is None and not self.m.imported("memory"):
            self.fail(f"{instr.op}: module has no memory")

    def run(self):
        for instr in self.f.body:
            self.step(instr)
        if self.ctrls:
            self.fail("function body not terminated by end")

    def step(self, instr: Instr):
        op = instr.op
        sig = _SIGS.get(op)
        if sig is not None:
            ins, outs = sig
            for t in reversed(ins):
                self.pop(t)
            for t in outs:
                self.push(t)
            return
        if op in _LOADS:
            t, natural = _LOADS[op]
            self.check_memarg(instr, natural)
            self.pop("i32")
            self.push(t)
            return
        if op in _STORES:
            t, natural = _STORES[op]
            self.check_memarg(instr, natural)
            self.pop(t)
            self.pop("i32")
            return
        if op == "nop":
            return
        if op == "unreachable":
            self.mark_unreachable()
            return
        if op == "drop":
            self.pop()
            return
        if op == "select":
            self.pop("i32")
            t1 = self.pop()
            t2 = self.pop()
            if t1 != t2 and UNKNOWN not in (t1, t2):
                self.fail(f"select operands differ: {t1} vs {t2}")
            self.push(t2 if t1 == UNKNOWN else t1)
            return
        if op in ("block", "loop"):
            bt = instr.args[0]
            self.push_ctrl(op, () if bt is None else (bt,))
            return
        if op == "if":
            self.pop("i32")
            bt = instr.args[0]
            self.push_ctrl("if", () if bt is None else (bt,))
            return
        if op == "else":
            frame = self.ctrls[-1] if self.ctrls else None
            if frame is None or frame.op != "if":
                self.fail("else without matching if")
            self.pop_ctrl()
            self.push_ctrl("else", frame.end_types)
            return
        if op == "end":
            frame = self.pop_ctrl()
            if frame.op == "if" and frame.end_types:
                self.fail("if without else cannot produce a value")
            for t in frame.end_types:
                self.push(t)
            return
        if op == "br":
            frame = self.label(instr.args[0])
            for t in reversed(frame.label_types()):
                self.pop(t)
            self.mark_unreachable()
            return
        if op == "br_if":
            self.pop("i32")
            frame = self.label(instr.args[0])
            lt = frame.label_types()
            for t in reversed(lt):
                self.pop(t)
            for t in lt:
                self.push(t)
            return
        if op == "br_table":
            targets, default = instr.args
            self.pop("i32")
            dframe = self.label(default)
            dt = dframe.label_types()
            for tgt in targets:
                if self.label(tgt).label_types() != dt:
                    self.fail("br_table target label types differ")
            for t in reversed(dt):
                self.pop(t)
            self.mark_unreachable()
            return
        if op == "return":
            for t in reversed(self.results):
                self.pop(t)
            self.mark_unreachable()
            return
        if op == "call":
            idx = instr.args[0]
            if idx >= self.m.num_funcs:
                self.fail(f"call: function index {idx} out of range")
            ft = self.m.func_type(idx)
            for t in reversed(ft.params):
                self.pop(t)
            for t in ft.results:
                self.push(t)
            return
        if op == "call_indirect":
            if self.m.table is None and not self.m.imported("table"):
                self.fail("call_indirect: module has no table")
            ti = instr.args[0]
            if ti >= len(self.m.types):
                self.fail(f"call_indirect: type index {ti} out of range")
            ft = self.m.types[ti]
            self.pop("i32")
            for t in reversed(ft.params):
                self.pop(t)
            for t in ft.results:
                self.push(t)
            return
        if op in ("local.get", "local.set", "local.tee"):
            idx = instr.args[0]
            if idx >= len(self.locals):
                self.fail(f"{op}: local index {idx} out of range")
            t = self.locals[idx]
            if op == "local.get":
                self.push(t)
            elif op == "local.set":
                self.pop(t)
            else:
                self.pop(t)
                self.push(t)
            return
        if op in ("global.get", "global.set"):
            idx = instr.args[0]
            if idx >= self.m.num_globals:
                self.fail(f"{op}: global index {idx} out of range")
            t, mut = self.m.global_type(idx)
            if op == "global.get":
                self.push(t)
            else:
                if not mut:
                    self.fail(f"global.set on immutable global {idx}")
                self.pop(t)
            return
        if op in ("memory.size", "memory.grow"):
            if self.m.memory is None and not self.m.imported("memory"):
                self.fail(f"{op}: module has no memory")
            if op == "memory.grow":
                self.pop("i32")
            self.push("i32")
            return
        self.fail(f"unknown instruction {op}")


def _check_const_expr(
    m: ModuleIR, expr: list[Instr], expect: str, report: ValidationReport,
    ctx: str, num_visible_globals: int,
):
    if len(expr) != 1:
        report.add(f"{ctx}: constant expression must be a single instruction")
        return
    instr = expr[0]
    if instr.op in ("i32.const", "i64.const", "f32.const", "f64.const"):
        t = instr.op.split(".")[0]
        if t != expect:
            report.add(f"{ctx}: init type {t}, expected {expect}")
        return
    if instr.op == "global.get":
        idx = instr.args[0]
        if idx >= num_visible_globals:
            report.add(f"{ctx}: init refers to non-imported global {idx}")
            return
        t, mut = m.global_type(idx)
        if mut:
            report.add(f"{ctx}: init refers to mutable global {idx}")
        if t != expect:
            report.add(f"{ctx}: init type {t}, expected {expect}")
        return
    report.add(f"{ctx}: non-constant init expression ({instr.op})")


def validate_module(m: ModuleIR) -> ValidationReport:
    """Type-check a module; returns an empty report iff it is valid."""
    report = ValidationReport()

    for i, im in enumerate(m.imports):
        if im.kind == "func" and im.desc >= len(m.types):
            report.add(f"import {i}: type index {im.desc} out of range")

    n_imp_glob = m.num_imported_globals
    for i, g in enumerate(m.globals):
        _check_const_expr(
            m, g.init, g.valtype, report, f"global {i}", n_imp_glob
        )

    for i, f in enumerate(m.functions):
        if f.type_idx >= len(m.types):
            report.add(f"func {i}: type index {f.type_idx} out of range")
            continue
        ftype = m.types[f.type_idx]
        try:
            _FuncChecker(m, f, ftype).run()
        except _Invalid as e:
            fi = m.num_imported_funcs + i
            report.add(f"func {fi}: {e}")

    limits = {
        "func": m.num_funcs,
        "global": m.num_globals,
        "memory": (1 if m.memory is not None else 0)
        + len(m.imported("memory")),
        "table": (1 if m.table is not None else 0) + len(m.imported("table")),
    }
    seen_names = set()
    for e in m.exports:
        if e.name in seen_names:
            report.add(f"duplicate export name {e.name!r}")
        seen_names.add(e.name)
        if e.index >= limits[e.kind]:
            report.add(f"export {e.name!r}: {e.kind} index {e.index} "
                       "out of range")

    if m.start is not None:
        if m.start >= m.num_funcs:
            report.add(f"start: function index {m.start} out of range")
        elif m.func_type(m.start) != FuncType((), ()):
            report.add("start: function signature must be () -> ()")

    for i, e in enumerate(m.elems):
        if m.table is None and not m.imported("table"):
            report.add(f"elem {i}: module has no table")
        _check_const_expr(m, e.offset, "i32", report, f"elem {i}", n_imp_glob)
        for fi in e.func_indices:
            if fi >= m.num_funcs:
                report.add(f"elem {i}: function index {fi} out of range")

    for i, d in enumerate(m.data_segments):
        if m.memory is None and not m.imported("memory"):
            report.add(f"data {i}: module has no memory")
        _check_const_expr(m, d.offset, "i32", report, f"data {i}", n_imp_glob)

    return report
