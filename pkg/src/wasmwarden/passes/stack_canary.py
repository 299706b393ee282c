"""Stack-canary pass: plant an 8-byte random canary at the base of each
function's linear-memory frame, verify it at a single rewritten exit.

Every defined function is rewritten to
``preamble ++ block ++ body-with-returns-redirected ++ end ++ postamble``:
the preamble reserves 16 bytes below the shadow stack pointer and stores
the canary there; original returns become branches to the wrapper end; the
postamble compares the stored value and traps on mismatch.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from ..ir import (
    FunctionIR,
    I,
    Instr,
    ModuleIR,
    SiteInfo,
    WasmError,
)
from .sites import SiteTable, collect_sites

FRAME_RESERVE = 16  # WASI keeps the stack 16-byte aligned


class SpGlobalMissing(WasmError):
    pass


@dataclass
class CanaryConfig:
    sp_global: int = 0  # global index of the shadow stack pointer
    rng_seed: Optional[int] = None
    canary_value: Optional[int] = None  # fixed value; None = draw per function


def _signed64(v: int) -> int:
    return v - (1 << 64) if v & (1 << 63) else v


def emit_inject_canary(cfg: CanaryConfig, canary: int) -> list[Instr]:
    """Reserve frame space and store the canary at the new stack base."""
    sp = cfg.sp_global
    return [
        I("global.get", sp),
        I("i32.const", FRAME_RESERVE),
        I("i32.sub"),
        I("global.set", sp),
        I("global.get", sp),
        I("i64.const", _signed64(canary)),
        I("i64.store", 3, 0),
    ]


def emit_validate_canary(
    cfg: CanaryConfig, canary: int, result_arity: int
) -> list[Instr]:
    """Compare the stored canary against the expected value; trap on
    mismatch, otherwise release the reserved space and return.

    The function's return value (if any) stays untouched on the operand
    stack underneath the check.
    """
    del result_arity  # identical sequence for arity 0 and 1
    sp = cfg.sp_global
    return [
        I("block", None),
        I("global.get", sp),
        I("i64.load", 3, 0),
        I("i64.const", _signed64(canary)),
        I("i64.eq"),
        I("br_if", 0),
        Instr("unreachable", site=SiteInfo("stack-canary", id=canary)),
        I("end"),
        I("global.get", sp),
        I("i32.const", FRAME_RESERVE),
        I("i32.add"),
        I("global.set", sp),
        I("return"),
    ]


def instrument_function_stack(
    f: FunctionIR,
    result_type: Optional[str],
    cfg: CanaryConfig,
    canary: int,
) -> FunctionIR:
    """Rewrite one function body; ``result_type`` is the function's single
    result valtype or None."""
    inner = f.body[:-1]  # strip the terminal end; the wrapper supplies it
    rewritten: list[Instr] = []
    depth = 1  # the wrapper block encloses the whole original body
    for instr in inner:
        if instr.op in ("block", "loop", "if"):
            depth += 1
        elif instr.op == "end":
            depth -= 1
        if instr.op == "return":
            rewritten.append(I("br", depth - 1))
        else:
            rewritten.append(instr)
    body = (
        emit_inject_canary(cfg, canary)
        + [I("block", result_type)]
        + rewritten
        + [I("end")]
        + emit_validate_canary(cfg, canary, 1 if result_type else 0)
        + [I("end")]
    )
    return FunctionIR(f.type_idx, list(f.locals), body)


def apply_stack_pass(
    m: ModuleIR, cfg: CanaryConfig | None = None
) -> tuple[ModuleIR, SiteTable]:
    """Instrument every defined function; returns the new module and the
    table of inserted trap sites (one per function, id = canary value)."""
    cfg = cfg or CanaryConfig()
    n_glob = m.num_globals
    if cfg.sp_global >= n_glob:
        raise SpGlobalMissing(
            f"stack-pointer global {cfg.sp_global} does not exist"
        )
    vt, mutable = m.global_type(cfg.sp_global)
    if vt != "i32" or not mutable:
        raise SpGlobalMissing(
            f"global {cfg.sp_global} is {vt}/"
            f"{'mut' if mutable else 'const'}, need mutable i32"
        )

    rng = random.Random(cfg.rng_seed)
    out = m.copy()
    new_funcs = []
    for f in out.functions:
        ftype = out.types[f.type_idx]
        canary = (
            cfg.canary_value
            if cfg.canary_value is not None
            else rng.getrandbits(64)
        )
        result_type = ftype.results[0] if ftype.results else None
        new_funcs.append(
            instrument_function_stack(f, result_type, cfg, canary)
        )
    out.functions = new_funcs
    return out, collect_sites(out).by_kind("stack-canary")
