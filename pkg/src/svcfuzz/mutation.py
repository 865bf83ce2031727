"""Byte-level mutation operators: flips, arithmetic, interesting values,
havoc, and splice."""
from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum


class InvalidOffset(ValueError):
    pass


class OpKind(str, Enum):
    BIT_BYTE_FLIP = "bit_byte_flip"
    ARITHMETIC = "arithmetic"
    INTERESTING_REPLACE = "interesting_replace"
    HAVOC = "havoc"
    SPLICE = "splice"


# Boundary constants; the 1/2/4-byte subsets are selected per window width.
INTERESTING = (0, 1, 16, 32, 64, 127, 128, 255, 256, 512, 1024, 32767, 65535, 2147483647)

_HAVOC_MAX_OPS = 16
_HAVOC_MAX_SPAN = 32


@dataclass(frozen=True)
class MutationOp:
    """One mutation with optional explicit parameters; unset parameters are
    drawn from the campaign rng when the op is applied."""

    kind: OpKind
    bit: int | None = None  # BIT_BYTE_FLIP: bit index (bit 0 = LSB of byte 0)
    offset: int | None = None  # byte offset of the affected window
    width: int | None = None  # window width in bytes (1/2/4/8)
    value: int | None = None  # INTERESTING_REPLACE payload
    delta: int | None = None  # ARITHMETIC: +1 or -1
    cut: int | None = None  # SPLICE cut position
    other: bytes | None = None  # SPLICE second input
    havoc_ops: int | None = None


def flip_bit(data: bytes, k: int) -> bytes:
    if not 0 <= k < 8 * len(data):
        raise InvalidOffset(f"bit {k} out of range for {len(data)} bytes")
    out = bytearray(data)
    out[k // 8] ^= 1 << (k % 8)
    return bytes(out)


def flip_byte(data: bytes, offset: int) -> bytes:
    if not 0 <= offset < len(data):
        raise InvalidOffset(f"offset {offset} out of range for {len(data)} bytes")
    out = bytearray(data)
    out[offset] ^= 0xFF
    return bytes(out)


def arithmetic(data: bytes, offset: int, width: int, delta: int) -> bytes:
    """Add or subtract one on a little-endian window, wrapping in the window."""
    if width not in (1, 2, 4, 8):
        raise InvalidOffset(f"width must be 1/2/4/8, got {width}")
    if offset < 0 or offset + width > len(data):
        raise InvalidOffset(f"window [{offset}:{offset + width}] out of range for {len(data)} bytes")
    out = bytearray(data)
    window = int.from_bytes(out[offset:offset + width], "little")
    window = (window + delta) % (1 << (8 * width))
    out[offset:offset + width] = window.to_bytes(width, "little")
    return bytes(out)


def interesting_replace(data: bytes, offset: int, width: int, value: int) -> bytes:
    if width not in (1, 2, 4, 8):
        raise InvalidOffset(f"width must be 1/2/4/8, got {width}")
    if offset < 0 or offset + width > len(data):
        raise InvalidOffset(f"window [{offset}:{offset + width}] out of range for {len(data)} bytes")
    out = bytearray(data)
    out[offset:offset + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
    return bytes(out)


def splice(a: bytes, b: bytes, cut: int) -> bytes:
    """a[0..cut] ++ b[cut..]; the cut lies strictly inside both inputs."""
    if not 0 < cut < min(len(a), len(b)):
        raise InvalidOffset(f"cut {cut} not in (0, {min(len(a), len(b))})")
    return a[:cut] + b[cut:]


def havoc(data: bytes, rng: random.Random, ops: int | None = None) -> bytes:
    """1..16 stacked random edits: set a byte, delete a span, duplicate a span.

    The result is never empty: deletions keep at least one byte.
    """
    out = bytearray(data)
    for _ in range(ops if ops is not None else rng.randint(1, _HAVOC_MAX_OPS)):
        choice = rng.randrange(3)
        if choice == 0 or len(out) == 0:
            if not out:
                out.append(rng.randrange(256))
                continue
            out[rng.randrange(len(out))] = rng.randrange(256)
        elif choice == 1:
            if len(out) <= 1:
                continue
            span = rng.randint(1, min(len(out) - 1, _HAVOC_MAX_SPAN))
            start = rng.randrange(len(out) - span + 1)
            del out[start:start + span]
        else:
            span = rng.randint(1, min(len(out), _HAVOC_MAX_SPAN))
            start = rng.randrange(len(out) - span + 1)
            out[start:start + span] = out[start:start + span] * 2
    return bytes(out)


def _draw_window(rng: random.Random, size: int, widths=(1, 2, 4, 8)) -> tuple[int, int]:
    usable = [w for w in widths if w <= size]
    width = rng.choice(usable)
    return rng.randrange(size - width + 1), width


def mutate(data: bytes, op: MutationOp, rng: random.Random | None = None) -> bytes:
    """Apply one operator; parameters left unset on the op are drawn from rng."""
    if op.kind is OpKind.SPLICE:
        if op.other is None:
            raise InvalidOffset("splice needs a second input")
        cut = op.cut
        if cut is None:
            m = min(len(data), len(op.other))
            if m < 2:
                raise InvalidOffset("splice needs both inputs of length >= 2")
            cut = rng.randrange(1, m)
        return splice(data, op.other, cut)
    if not data:
        raise InvalidOffset("input must be non-empty")
    if op.kind is OpKind.BIT_BYTE_FLIP:
        if op.bit is not None:
            return flip_bit(data, op.bit)
        if op.offset is not None:
            return flip_byte(data, op.offset)
        if rng.randrange(2) == 0:
            return flip_bit(data, rng.randrange(8 * len(data)))
        return flip_byte(data, rng.randrange(len(data)))
    if op.kind is OpKind.ARITHMETIC:
        if op.offset is not None and op.width is not None:
            offset, width = op.offset, op.width
        else:
            offset, width = _draw_window(rng, len(data))
        delta = op.delta if op.delta is not None else rng.choice((1, -1))
        return arithmetic(data, offset, width, delta)
    if op.kind is OpKind.INTERESTING_REPLACE:
        if op.offset is not None and op.width is not None:
            offset, width = op.offset, op.width
        else:
            offset, width = _draw_window(rng, len(data), widths=(1, 2, 4))
        value = op.value
        if value is None:
            fitting = [v for v in INTERESTING if v < (1 << (8 * width))]
            value = rng.choice(fitting)
        return interesting_replace(data, offset, width, value)
    if op.kind is OpKind.HAVOC:
        return havoc(data, rng, op.havoc_ops)
    raise AssertionError(f"unhandled op kind {op.kind}")


def draw_op_kind(rng: random.Random, splice_ok: bool) -> OpKind:
    kinds = list(OpKind) if splice_ok else [k for k in OpKind if k is not OpKind.SPLICE]
    return rng.choice(kinds)
