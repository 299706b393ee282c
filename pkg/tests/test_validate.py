import modbuild
from wasmwarden import validate_module
from wasmwarden.ir import (
    Export,
    FuncType,
    FunctionIR,
    Global,
    I,
    ModuleIR,
)


def _minimal(body, params=(), results=(), locals_=()):
    m = ModuleIR()
    m.memory = (1, None)
    ti = m.add_type(FuncType(tuple(params), tuple(results)))
    m.functions.append(FunctionIR(ti, list(locals_), list(body)))
    return m


def test_corpus_modules_validate_clean():
    for name, m, _ in modbuild.corpus():
        rep = validate_module(m)
        assert rep.ok, f"{name}: {rep}"
    for m in (modbuild.bump_alloc_module(), modbuild.victim_module()):
        assert validate_module(m).ok


def test_type_mismatch_on_operand_stack():
    m = _minimal([I("i32.const", 1), I("i64.const", 2), I("i32.add"),
                  I("drop"), I("end")])
    assert not validate_module(m).ok


def test_stack_underflow():
    m = _minimal([I("i32.add"), I("drop"), I("end")])
    assert not validate_module(m).ok


def test_leftover_values_at_end():
    m = _minimal([I("i32.const", 1), I("end")])
    assert not validate_module(m).ok


def test_result_type_checked():
    ok = _minimal([I("i32.const", 1), I("end")], results=("i32",))
    assert validate_module(ok).ok
    bad = _minimal([I("i64.const", 1), I("end")], results=("i32",))
    assert not validate_module(bad).ok


def test_branch_depth_out_of_range():
    m = _minimal([I("block", None), I("br", 5), I("end"), I("end")])
    assert not validate_module(m).ok


def test_branch_to_function_label_is_valid():
    m = _minimal([I("br", 0), I("end")])
    assert validate_module(m).ok


def test_loop_label_takes_no_values():
    # branching to a loop re-enters with empty label types in the MVP
    m = _minimal([
        I("loop", None),
        I("i32.const", 1),
        I("br_if", 0),
        I("end"),
        I("end"),
    ])
    assert validate_module(m).ok


def test_unreachable_code_is_polymorphic():
    m = _minimal([
        I("unreachable"),
        I("i32.add"),  # operands come from the polymorphic stack
        I("drop"),
        I("end"),
    ])
    assert validate_module(m).ok


def test_local_index_bounds():
    m = _minimal([I("local.get", 3), I("drop"), I("end")], locals_=("i32",))
    assert not validate_module(m).ok


def test_global_mutability():
    m = _minimal([I("i32.const", 1), I("global.set", 0), I("end")])
    m.globals.append(Global("i32", False, [I("i32.const", 0)]))
    assert not validate_module(m).ok
    m.globals[0] = Global("i32", True, [I("i32.const", 0)])
    assert validate_module(m).ok


def test_memory_ops_require_memory():
    m = _minimal([I("i32.const", 0), I("i32.load", 2, 0), I("drop"),
                  I("end")])
    m.memory = None
    assert not validate_module(m).ok


def test_alignment_must_be_natural():
    m = _minimal([I("i32.const", 0), I("i32.load", 3, 0), I("drop"),
                  I("end")])
    assert not validate_module(m).ok  # 2^3 = 8 > 4-byte access


def test_export_duplicates_rejected():
    m = _minimal([I("end")])
    m.exports.append(Export("f", "func", 0))
    m.exports.append(Export("f", "func", 0))
    assert not validate_module(m).ok


def test_export_index_bounds():
    m = _minimal([I("end")])
    m.exports.append(Export("g", "func", 9))
    assert not validate_module(m).ok


def test_start_signature():
    m = _minimal([I("end")])
    m.start = 0
    assert validate_module(m).ok
    m2 = _minimal([I("drop"), I("end")], params=("i32",))
    m2.start = 0
    assert not validate_module(m2).ok


def test_if_branches_must_agree():
    m = _minimal([
        I("i32.const", 1),
        I("if", "i32"),
        I("i32.const", 1),
        I("else"),
        I("i64.const", 2),
        I("end"),
        I("drop"),
        I("end"),
    ])
    assert not validate_module(m).ok


def test_if_with_result_needs_else():
    m = _minimal([
        I("i32.const", 1),
        I("if", "i32"),
        I("i32.const", 1),
        I("end"),
        I("drop"),
        I("end"),
    ])
    assert not validate_module(m).ok


def test_select_operands_must_match():
    m = _minimal([
        I("i32.const", 1), I("i64.const", 2), I("i32.const", 0),
        I("select"), I("drop"), I("end"),
    ])
    assert not validate_module(m).ok


def test_call_argument_types():
    m = ModuleIR()
    m.memory = (1, None)
    callee_t = m.add_type(FuncType(("i64",), ()))
    caller_t = m.add_type(FuncType((), ()))
    m.functions.append(FunctionIR(callee_t, [], [I("drop"), I("end")]))
    m.functions.append(
        FunctionIR(caller_t, [], [I("i32.const", 1), I("call", 0), I("end")])
    )
    assert not validate_module(m).ok
