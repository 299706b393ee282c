import struct

import pytest
from hypothesis import given, strategies as st

import modbuild
from wasmwarden import (
    MalformedBinary,
    ModuleIR,
    UnsupportedFeature,
    encode_module,
    parse_module,
)
from wasmwarden.ir import CustomSection, Export, FuncType, FunctionIR, I


def all_test_modules():
    mods = [m for _, m, _ in modbuild.corpus()]
    mods.append(modbuild.bump_alloc_module())
    mods.append(modbuild.bump_alloc_module(use_names=True))
    mods.append(modbuild.victim_module())
    return mods


def test_roundtrip_fixpoint_on_corpus():
    for m in all_test_modules():
        raw = encode_module(m)
        m2 = parse_module(raw)
        assert m2 == m
        # second encode is byte-identical (fixpoint)
        assert encode_module(m2) == raw


def test_roundtrip_many_functions_crosses_leb_boundary():
    """128+ entries force multi-byte LEB counts in several sections."""
    m = ModuleIR()
    m.memory = (1, None)
    ti = m.add_type(FuncType((), ("i32",)))
    for k in range(130):
        m.functions.append(
            FunctionIR(ti, [], [I("i32.const", k), I("end")])
        )
        m.exports.append(Export(f"f{k}", "func", k))
    raw = encode_module(m)
    m2 = parse_module(raw)
    assert m2 == m
    assert len(m2.functions) == 130


def test_header_checks():
    with pytest.raises(MalformedBinary):
        parse_module(b"\x00asm")
    with pytest.raises(MalformedBinary):
        parse_module(b"\x00wasm\x01\x00\x00\x00")
    with pytest.raises(MalformedBinary):
        parse_module(b"\x00asm\x02\x00\x00\x00")


def test_out_of_order_sections_rejected():
    m = modbuild.echo_module()
    raw = bytearray(encode_module(m))
    # duplicate the type section at the end (id 1 after later ids)
    pos = 8
    sec_id = raw[pos]
    assert sec_id == 1
    size = raw[pos + 1]
    assert size < 0x80
    section = bytes(raw[pos : pos + 2 + size])
    with pytest.raises(MalformedBinary):
        parse_module(bytes(raw) + section)


def test_post_mvp_opcode_rejected():
    m = ModuleIR()
    m.memory = (1, None)
    ti = m.add_type(FuncType((), ()))
    m.functions.append(FunctionIR(ti, [], [I("nop"), I("end")]))
    raw = bytearray(encode_module(m))
    idx = raw.find(bytes([0x01, 0x0B]))  # nop, end
    assert idx > 0
    raw[idx] = 0xFC  # misc-ops prefix (saturating truncation etc.)
    with pytest.raises(UnsupportedFeature):
        parse_module(bytes(raw))


def test_custom_sections_roundtrip():
    m = modbuild.echo_module()
    m.custom_sections.append(CustomSection("producers", b"\x00", 7))
    m.custom_sections.append(CustomSection("tag.a", b"hello", 0))
    raw = encode_module(m)
    m2 = parse_module(raw)
    # re-encoding orders custom sections by their anchor section
    assert sorted((c.name, c.data) for c in m2.custom_sections) == sorted(
        (c.name, c.data) for c in m.custom_sections
    )


def test_custom_section_after_absent_section_survives():
    m = ModuleIR()
    m.memory = (1, None)
    # anchored after the data section (id 11), which this module lacks
    m.custom_sections.append(CustomSection("trailer", b"\x01\x02", 11))
    m2 = parse_module(encode_module(m))
    assert [(c.name, c.data) for c in m2.custom_sections] == [
        ("trailer", b"\x01\x02")
    ]


def test_name_section_roundtrip():
    m = modbuild.bump_alloc_module(use_names=True)
    m2 = parse_module(encode_module(m))
    assert m2.names == m.names
    assert set(m.names.values()) == {"malloc", "free", "calloc", "realloc"}


def test_float_const_bit_patterns_preserved():
    m = ModuleIR()
    m.memory = (1, None)
    ti = m.add_type(FuncType((), ("f64",)))
    nan_bits = struct.unpack("<Q", struct.pack("<d", float("nan")))[0] | 1
    m.functions.append(
        FunctionIR(ti, [], [I("f64.const", nan_bits), I("end")])
    )
    m2 = parse_module(encode_module(m))
    assert m2.functions[0].body[0].args[0] == nan_bits


@given(st.binary(min_size=0, max_size=64))
def test_garbage_never_crashes_the_parser(data):
    try:
        parse_module(b"\x00asm\x01\x00\x00\x00" + data)
    except (MalformedBinary, UnsupportedFeature):
        pass


def test_truncated_section_reports_offset():
    raw = encode_module(modbuild.echo_module())
    # cutting one byte short always lands inside the final section
    with pytest.raises(MalformedBinary) as e:
        parse_module(raw[:-1])
    assert e.value.offset >= 0
