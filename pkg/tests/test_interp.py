import random
import struct

import pytest

import modbuild
from wasmwarden import Engine, RunLimits, WasiConfig
from wasmwarden.interp import (
    DIV_ZERO,
    INDIRECT_MISMATCH,
    INT_OVERFLOW,
    MEM_OOB,
    STACK_EXHAUSTED,
    UNINIT_TABLE,
    UNREACHABLE,
)
from wasmwarden.ir import (
    ElemSegment,
    Export,
    FuncType,
    FunctionIR,
    I,
    ModuleIR,
)


def make_func_module(params, results, body, locals_=(), pages=1):
    m = ModuleIR()
    if pages:
        m.memory = (pages, None)
    ti = m.add_type(FuncType(tuple(params), tuple(results)))
    m.functions.append(FunctionIR(ti, list(locals_), list(body)))
    m.exports.append(Export("f", "func", 0))
    return m


def call(m, args, fuel=100_000):
    eng = Engine(m)
    inst = eng.instantiate()
    return eng.call_export(inst, "f", list(args), RunLimits(fuel=fuel))


def binop(op, a, b, tys=("i32", "i32"), res="i32"):
    m = make_func_module(
        tys, (res,),
        [I("local.get", 0), I("local.get", 1), I(op), I("end")],
    )
    outcome, results = call(m, [a, b])
    return outcome, (results[0] if results else None)


M32 = 0xFFFFFFFF
M64 = 0xFFFFFFFFFFFFFFFF


def s32(v):
    return v - (1 << 32) if v & (1 << 31) else v


def test_i32_arith_against_python_oracle():
    rng = random.Random(1234)
    for _ in range(200):
        a, b = rng.getrandbits(32), rng.getrandbits(32)
        assert binop("i32.add", a, b)[1] == (a + b) & M32
        assert binop("i32.sub", a, b)[1] == (a - b) & M32
        assert binop("i32.mul", a, b)[1] == (a * b) & M32
        assert binop("i32.xor", a, b)[1] == a ^ b
        assert binop("i32.shl", a, b)[1] == (a << (b % 32)) & M32
        assert binop("i32.shr_u", a, b)[1] == a >> (b % 32)
        assert binop("i32.lt_s", a, b)[1] == int(s32(a) < s32(b))


def test_signed_division_semantics():
    # Wasm signed division truncates toward zero
    assert binop("i32.div_s", (-7) & M32, 2)[1] == (-3) & M32
    assert binop("i32.rem_s", (-7) & M32, 2)[1] == (-1) & M32
    assert binop("i32.div_s", 7, (-2) & M32)[1] == (-3) & M32
    assert binop("i32.rem_s", 7, (-2) & M32)[1] == 1


def test_division_traps():
    out, _ = binop("i32.div_u", 1, 0)
    assert out.status == "trap" and out.trap_kind == DIV_ZERO
    out, _ = binop("i32.div_s", 0x80000000, M32)  # INT_MIN / -1
    assert out.status == "trap" and out.trap_kind == INT_OVERFLOW
    out, _ = binop("i32.rem_s", 0x80000000, M32)
    assert out.status == "exit"  # rem of INT_MIN by -1 is 0, not a trap


def test_i64_ops():
    a, b = 0x0123456789ABCDEF, 0xFEDCBA9876543210
    assert binop("i64.add", a, b, ("i64", "i64"), "i64")[1] == (a + b) & M64
    assert binop("i64.rotl", a, 8, ("i64", "i64"), "i64")[1] == (
        ((a << 8) | (a >> 56)) & M64
    )


def test_clz_ctz_popcnt():
    m = make_func_module(("i32",), ("i32",),
                         [I("local.get", 0), I("i32.clz"), I("end")])
    assert call(m, [1])[1][0] == 31
    assert call(m, [0])[1][0] == 32
    m = make_func_module(("i32",), ("i32",),
                         [I("local.get", 0), I("i32.ctz"), I("end")])
    assert call(m, [0x80000000])[1][0] == 31
    assert call(m, [0])[1][0] == 32


def test_f32_demotion():
    m = make_func_module(
        ("f64",), ("f32",),
        [I("local.get", 0), I("f32.demote_f64"), I("end")],
    )
    _, res = call(m, [1.1])
    assert res[0] == struct.unpack("<f", struct.pack("<f", 1.1))[0]


def test_float_trunc_traps_on_nan():
    m = make_func_module(
        ("f64",), ("i32",),
        [I("local.get", 0), I("i32.trunc_f64_s"), I("end")],
    )
    out, _ = call(m, [float("nan")])
    assert out.status == "trap" and out.trap_kind == INT_OVERFLOW
    out, _ = call(m, [1e300])
    assert out.status == "trap" and out.trap_kind == INT_OVERFLOW
    _, res = call(m, [-3.99])
    assert res[0] == (-3) & M32


def test_memory_out_of_bounds():
    m = make_func_module(
        ("i32",), ("i32",),
        [I("local.get", 0), I("i32.load", 2, 0), I("end")],
    )
    out, res = call(m, [0])
    assert out.status == "exit"
    out, _ = call(m, [65536 - 3])  # 4-byte read past the single page
    assert out.status == "trap" and out.trap_kind == MEM_OOB


def test_store_then_load_roundtrip():
    body = [
        I("i32.const", 100), I("local.get", 0), I("i64.store", 3, 0),
        I("i32.const", 100), I("i64.load32_u", 2, 0),
        I("end"),
    ]
    m = make_func_module(("i64",), ("i64",), body)
    _, res = call(m, [0x1122334455667788])
    assert res[0] == 0x55667788


def test_signed_narrow_load():
    body = [
        I("i32.const", 0), I("i32.const", 0x80), I("i32.store8", 0, 0),
        I("i32.const", 0), I("i32.load8_s", 0, 0),
        I("end"),
    ]
    m = make_func_module((), ("i32",), body)
    _, res = call(m, [])
    assert res[0] == (-128) & M32


def test_unreachable_records_location():
    m = make_func_module((), (), [I("nop"), I("unreachable"), I("end")])
    out, _ = call(m, [])
    assert out.status == "trap"
    assert out.trap_kind == UNREACHABLE
    assert out.trap_function == 0
    assert out.trap_offset == 1


def test_call_stack_exhaustion():
    m = make_func_module((), (), [I("call", 0), I("end")])
    out, _ = call(m, [], fuel=10_000_000)
    assert out.status == "trap" and out.trap_kind == STACK_EXHAUSTED


def test_call_indirect_traps():
    m = ModuleIR()
    m.memory = (1, None)
    t_void = m.add_type(FuncType((), ()))
    t_i32 = m.add_type(FuncType((), ("i32",)))
    m.functions.append(FunctionIR(t_void, [], [I("end")]))
    m.functions.append(
        FunctionIR(
            m.add_type(FuncType(("i32",), ())), [],
            [I("local.get", 0), I("call_indirect", t_i32), I("drop"),
             I("end")],
        )
    )
    m.table = (3, 3)
    m.elems.append(ElemSegment([I("i32.const", 0)], [0]))
    m.exports.append(Export("f", "func", 1))
    eng = Engine(m)
    inst = eng.instantiate()
    out, _ = eng.call_export(inst, "f", [0])  # wrong signature
    assert out.trap_kind == INDIRECT_MISMATCH
    out, _ = eng.call_export(inst, "f", [1])  # never initialized
    assert out.trap_kind == UNINIT_TABLE
    out, _ = eng.call_export(inst, "f", [7])  # out of table bounds
    assert out.trap_kind == UNINIT_TABLE


def test_fuel_accounting_is_exact():
    # two instructions: i32.const, end
    m = make_func_module((), ("i32",), [I("i32.const", 5), I("end")])
    out, res = call(m, [], fuel=2)
    assert out.status == "exit" and res == [5]
    assert out.instructions_executed == 2
    out, _ = call(m, [], fuel=1)
    assert out.status == "fuel-exhausted"
    assert out.instructions_executed == 1


def test_fuel_spans_calls():
    m = ModuleIR()
    m.memory = (1, None)
    ti = m.add_type(FuncType((), ("i32",)))
    m.functions.append(FunctionIR(ti, [], [I("i32.const", 7), I("end")]))
    # call(1) + const(1) + end(1) + end(1) = 4 instructions
    m.functions.append(FunctionIR(ti, [], [I("call", 0), I("end")]))
    m.exports.append(Export("f", "func", 1))
    eng = Engine(m)
    out, res = eng.call_export(eng.instantiate(), "f", [],
                               RunLimits(fuel=4))
    assert out.status == "exit" and res == [7]
    assert out.instructions_executed == 4
    out, _ = eng.call_export(eng.instantiate(), "f", [], RunLimits(fuel=3))
    assert out.status == "fuel-exhausted"


def test_memory_grow_and_size():
    body = [
        I("memory.size"),
        I("i32.const", 2), I("memory.grow"), I("drop"),
        I("memory.size"),
        I("i32.add"),
        I("end"),
    ]
    m = make_func_module((), ("i32",), body)
    _, res = call(m, [])
    assert res[0] == 1 + 3
    # growth refused past the limit reports -1
    body = [I("i32.const", 5000), I("memory.grow"), I("end")]
    m = make_func_module((), ("i32",), body)
    _, res = call(m, [])
    assert res[0] == M32


def test_br_table_dispatch():
    body = [
        I("block", None), I("block", None), I("block", None),
        I("local.get", 0),
        I("br_table", (0, 1), 2),
        I("end"), I("i32.const", 10), I("return"),
        I("end"), I("i32.const", 20), I("return"),
        I("end"), I("i32.const", 30),
        I("end"),
    ]
    m = make_func_module(("i32",), ("i32",), body)
    assert call(m, [0])[1] == [10]
    assert call(m, [1])[1] == [20]
    assert call(m, [2])[1] == [30]  # default
    assert call(m, [99])[1] == [30]


def test_loop_counts_down():
    body = [
        I("loop", None),
        I("local.get", 0), I("i32.const", 1), I("i32.sub"),
        I("local.set", 0),
        I("local.get", 0),
        I("br_if", 0),
        I("end"),
        I("local.get", 0),
        I("end"),
    ]
    m = make_func_module(("i32",), ("i32",), body)
    out, res = call(m, [1000])
    assert res == [0]
    # the loop opener re-executes on every back edge: 7 per iteration,
    # then end + local.get + terminal end
    assert out.instructions_executed == 1000 * 7 + 3


# -------------------------------------------------------------- WASI


def test_wasi_echo_roundtrip():
    eng = Engine(modbuild.echo_module())
    inst = eng.instantiate(WasiConfig(stdin=b"hi there"))
    out = eng.run_start(inst)
    assert out.status == "exit" and out.exit_code == 0
    assert out.stdout == b"hi there"


def test_wasi_exit_code_is_not_a_crash():
    from modbuild import _exit_code_program

    eng = Engine(_exit_code_program())
    inst = eng.instantiate(WasiConfig(stdin=struct.pack("<I", 7)))
    out = eng.run_start(inst)
    assert out.status == "exit"
    assert out.exit_code == 3


def test_wasi_random_get_is_seeded():
    m = modbuild.new_module(imports=("fd_write",))
    body = [
        # random_get(64, 8) then write those 8 bytes
        I("i32.const", 64), I("i32.const", 8), I("call", 1), I("drop"),
    ] + modbuild.write_stdout(8, fd_write_idx=0) + [I("end")]
    ti = m.add_type(FuncType(("i32", "i32"), ("i32",)))
    from wasmwarden.ir import Import

    m.imports.append(
        Import("wasi_snapshot_preview1", "random_get", "func", ti)
    )
    modbuild.add_start(m, body)
    eng = Engine(m)
    outs = []
    for _ in range(2):
        inst = eng.instantiate(WasiConfig(rng_seed=42))
        outs.append(eng.run_start(inst).stdout)
    assert outs[0] == outs[1] and len(outs[0]) == 8
    inst = eng.instantiate(WasiConfig(rng_seed=43))
    assert eng.run_start(inst).stdout != outs[0]


def test_wasi_args_get():
    m = modbuild.new_module(imports=("fd_write",))
    from wasmwarden.ir import Import

    t2 = m.add_type(FuncType(("i32", "i32"), ("i32",)))
    m.imports.insert(
        0, Import("wasi_snapshot_preview1", "args_sizes_get", "func", t2)
    )
    body = [
        I("i32.const", 200), I("i32.const", 204), I("call", 0), I("drop"),
        # write the two u32 answers (argc, total bytes)
        I("i32.const", 64),
        I("i32.const", 200), I("i32.load", 2, 0), I("i32.store", 2, 0),
        I("i32.const", 68),
        I("i32.const", 204), I("i32.load", 2, 0), I("i32.store", 2, 0),
    ] + modbuild.write_stdout(8, fd_write_idx=1) + [I("end")]
    modbuild.add_start(m, body)
    eng = Engine(m)
    inst = eng.instantiate(WasiConfig(argv=["prog", "abc"]))
    out = eng.run_start(inst)
    argc, total = struct.unpack("<II", out.stdout)
    assert argc == 2
    assert total == len(b"prog\x00abc\x00")


def test_engine_rejects_unknown_imports():
    from wasmwarden.interp import UnsupportedImport
    from wasmwarden.ir import Import

    m = modbuild.new_module(imports=())
    ti = m.add_type(FuncType((), ()))
    m.imports.append(Import("env", "mystery", "func", ti))
    modbuild.add_start(m, [I("end")])
    with pytest.raises(UnsupportedImport):
        Engine(m)
