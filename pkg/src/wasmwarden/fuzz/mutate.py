"""AFL-style input mutators: deterministic stages enumerated by index,
plus rng-driven havoc and splice."""

from __future__ import annotations

import random

MAX_INPUT_LEN = 1 << 20
ARITH_MAX = 35

INTERESTING_8 = [-128, -1, 0, 1, 16, 32, 64, 100, 127]
INTERESTING_16 = INTERESTING_8 + [-32768, -129, 128, 255, 256, 512, 1000,
                                  1024, 4096, 32767]
INTERESTING_32 = INTERESTING_16 + [-2147483648, -100663046, -32769, 32768,
                                   65535, 65536, 100663045, 2147483647]

DETERMINISTIC_STAGES = ("bitflip", "byteflip", "arith8", "arith16",
                        "arith32", "interesting")
RANDOM_STAGES = ("havoc", "splice")
STAGES = DETERMINISTIC_STAGES + RANDOM_STAGES


def stage_size(data: bytes, stage: str) -> int:
    """Number of enumerable variants for a deterministic stage."""
    n = len(data)
    if stage == "bitflip":
        return n * 8
    if stage == "byteflip":
        return n
    if stage == "arith8":
        return n * 2 * ARITH_MAX
    if stage == "arith16":
        return max(n - 1, 0) * 2 * 2 * ARITH_MAX
    if stage == "arith32":
        return max(n - 3, 0) * 2 * 2 * ARITH_MAX
    if stage == "interesting":
        return (n * len(INTERESTING_8)
                + max(n - 1, 0) * 2 * len(INTERESTING_16)
                + max(n - 3, 0) * 2 * len(INTERESTING_32))
    return 0  # havoc/splice are rng-driven


def _set_word(buf: bytearray, pos: int, width: int, value: int, big: bool):
    raw = (value & ((1 << (8 * width)) - 1)).to_bytes(
        width, "big" if big else "little"
    )
    buf[pos: pos + width] = raw


def _arith_variant(data: bytes, index: int, width: int) -> bytes:
    per_pos = 2 * 2 * ARITH_MAX if width > 1 else 2 * ARITH_MAX
    pos = index // per_pos
    rest = index % per_pos
    big = False
    if width > 1:
        big = rest >= 2 * ARITH_MAX
        rest %= 2 * ARITH_MAX
    delta = rest // 2 + 1
    if rest % 2:
        delta = -delta
    buf = bytearray(data)
    old = int.from_bytes(
        data[pos: pos + width], "big" if big else "little"
    )
    _set_word(buf, pos, width, old + delta, big)
    return bytes(buf)


def _interesting_variant(data: bytes, index: int) -> bytes:
    n = len(data)
    n8 = n * len(INTERESTING_8)
    n16 = max(n - 1, 0) * 2 * len(INTERESTING_16)
    buf = bytearray(data)
    if index < n8:
        pos, k = divmod(index, len(INTERESTING_8))
        buf[pos] = INTERESTING_8[k] & 0xFF
        return bytes(buf)
    index -= n8
    if index < n16:
        per = 2 * len(INTERESTING_16)
        pos, rest = divmod(index, per)
        big, k = divmod(rest, len(INTERESTING_16))
        _set_word(buf, pos, 2, INTERESTING_16[k], bool(big))
        return bytes(buf)
    index -= n16
    per = 2 * len(INTERESTING_32)
    pos, rest = divmod(index, per)
    big, k = divmod(rest, len(INTERESTING_32))
    _set_word(buf, pos, 4, INTERESTING_32[k], bool(big))
    return bytes(buf)


def _havoc(data: bytes, rng: random.Random, max_len: int) -> bytes:
    buf = bytearray(data)
    for _ in range(1 << rng.randint(1, 6)):
        if not buf:
            buf.extend(rng.randbytes(rng.randint(1, 8)))
            continue
        op = rng.randrange(9)
        if op == 0:  # flip one bit
            pos = rng.randrange(len(buf))
            buf[pos] ^= 1 << rng.randrange(8)
        elif op == 1:  # random byte
            buf[rng.randrange(len(buf))] = rng.randrange(256)
        elif op == 2:  # interesting byte
            buf[rng.randrange(len(buf))] = rng.choice(INTERESTING_8) & 0xFF
        elif op == 3:  # add/sub byte
            pos = rng.randrange(len(buf))
            buf[pos] = (buf[pos] + rng.randint(-ARITH_MAX, ARITH_MAX)) & 0xFF
        elif op == 4 and len(buf) >= 4:  # interesting dword
            pos = rng.randrange(len(buf) - 3)
            _set_word(buf, pos, 4, rng.choice(INTERESTING_32), rng.random() < 0.5)
        elif op == 5 and len(buf) > 1:  # delete block
            start = rng.randrange(len(buf))
            size = rng.randint(1, min(len(buf) - start, max(len(buf) // 4, 1)))
            del buf[start: start + size]
        elif op == 6:  # duplicate or insert block
            if len(buf) >= max_len:
                continue
            start = rng.randrange(len(buf))
            size = rng.randint(1, min(len(buf) - start, 64))
            chunk = (buf[start: start + size] if rng.random() < 0.75
                     else rng.randbytes(size))
            at = rng.randrange(len(buf) + 1)
            buf[at:at] = chunk
        elif op == 7:  # overwrite block with a copy
            start = rng.randrange(len(buf))
            size = rng.randint(1, min(len(buf) - start, 64))
            src = rng.randrange(len(buf))
            chunk = bytes(buf[src: src + size])
            buf[start: start + len(chunk)] = chunk
        else:  # xor byte
            pos = rng.randrange(len(buf))
            buf[pos] ^= rng.randrange(1, 256)
    return bytes(buf[:max_len])


def _splice(data: bytes, other: bytes, rng: random.Random,
            max_len: int) -> bytes:
    if not data or not other:
        combined = data + other
    else:
        a = rng.randint(1, len(data))
        b = rng.randrange(len(other))
        combined = data[:a] + other[b:]
    return _havoc(combined[:max_len], rng, max_len)


def mutate(
    data: bytes,
    rng: random.Random,
    stage: str,
    index: int | None = None,
    other: bytes | None = None,
    max_len: int = MAX_INPUT_LEN,
) -> bytes:
    """One mutated copy of ``data``.

    Deterministic stages take ``index`` in ``range(stage_size(data,
    stage))``; havoc/splice draw from ``rng`` (splice also needs
    ``other``)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "havoc":
        return _havoc(data, rng, max_len)
    if stage == "splice":
        return _splice(data, other or b"", rng, max_len)
    assert index is not None, f"stage {stage} needs an index"
    if stage == "bitflip":
        buf = bytearray(data)
        buf[index // 8] ^= 1 << (index % 8)
        return bytes(buf)
    if stage == "byteflip":
        buf = bytearray(data)
        buf[index] ^= 0xFF
        return bytes(buf)
    if stage == "arith8":
        return _arith_variant(data, index, 1)
    if stage == "arith16":
        return _arith_variant(data, index, 2)
    if stage == "arith32":
        return _arith_variant(data, index, 4)
    return _interesting_variant(data, index)
