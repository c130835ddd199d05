"""AFL-style mutation catalog: deterministic walks, havoc stacking, splicing."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

from .rng import RngState

MAX_INPUT_SIZE = 1 << 20
ARITH_MAX = 35
INTERESTING = (-1, 0, 1, 16, 32, 64, 100, 127, 128, 255, 256, 512, 1000, 1024, 4096, 32767, 65535)

BITFLIP_KINDS = ("bitflip1", "bitflip2", "bitflip4")
BYTEFLIP_KINDS = ("byteflip1", "byteflip2", "byteflip4")
ARITH_KINDS = ("arith8", "arith16", "arith32")
INTEREST_KINDS = ("interest8", "interest16", "interest32")
CHUNK_KINDS = ("chunk-delete", "chunk-duplicate", "chunk-overwrite", "chunk-insert")
KINDS = BITFLIP_KINDS + BYTEFLIP_KINDS + ARITH_KINDS + INTEREST_KINDS + CHUNK_KINDS + ("splice",)

_WIDTH = {"8": 1, "16": 2, "32": 4}
_FMT = {1: "B", 2: "H", 4: "I"}


def _interesting_for(width: int) -> tuple[int, ...]:
    bits = 8 * width
    lo, hi = -(1 << (bits - 1)), (1 << bits) - 1
    return tuple(v for v in INTERESTING if lo <= v <= hi)


INTERESTING_BY_WIDTH = {w: _interesting_for(w) for w in (1, 2, 4)}


class InapplicableMutation(Exception):
    """The op cannot be applied to this buffer (out of range, too large, or a no-op)."""


@dataclass(frozen=True)
class MutationOp:
    """One mutation.

    ``pos`` is a bit offset for bitflips and a byte offset otherwise.
    ``value`` is the arithmetic delta or the interesting value; ``length``
    and ``dst`` parametrize chunk ops; ``data`` is inserted bytes.
    """

    kind: str
    pos: int = 0
    value: int = 0
    big_endian: bool = False
    length: int = 0
    dst: int = 0
    data: bytes = b""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mutation kind {self.kind!r}")
        if self.kind in ARITH_KINDS and not (1 <= abs(self.value) <= ARITH_MAX):
            raise ValueError("arith delta must be in +/-1..35")
        if self.kind in INTEREST_KINDS and self.value not in INTERESTING:
            raise ValueError(f"{self.value} is not an interesting value")


def _put_int(buf: bytearray, pos: int, width: int, value: int, big_endian: bool) -> None:
    fmt = (">" if big_endian else "<") + _FMT[width]
    struct.pack_into(fmt, buf, pos, value & ((1 << (8 * width)) - 1))


def _get_int(buf: bytes, pos: int, width: int, big_endian: bool) -> int:
    fmt = (">" if big_endian else "<") + _FMT[width]
    return struct.unpack_from(fmt, buf, pos)[0]


def apply_op(data: bytes, op: MutationOp, max_size: int = MAX_INPUT_SIZE) -> bytes:
    """Apply a single op; raises :class:`InapplicableMutation` when it cannot."""
    kind = op.kind
    n = len(data)
    buf = bytearray(data)

    if kind in BITFLIP_KINDS:
        nbits = int(kind[7:])
        if op.pos < 0 or op.pos + nbits > 8 * n:
            raise InapplicableMutation(kind)
        for bit in range(op.pos, op.pos + nbits):
            buf[bit >> 3] ^= 0x80 >> (bit & 7)
    elif kind in BYTEFLIP_KINDS:
        width = int(kind[8:])
        if op.pos < 0 or op.pos + width > n:
            raise InapplicableMutation(kind)
        for i in range(op.pos, op.pos + width):
            buf[i] ^= 0xFF
    elif kind in ARITH_KINDS:
        width = _WIDTH[kind[5:]]
        if op.pos < 0 or op.pos + width > n:
            raise InapplicableMutation(kind)
        cur = _get_int(buf, op.pos, width, op.big_endian)
        _put_int(buf, op.pos, width, cur + op.value, op.big_endian)
    elif kind in INTEREST_KINDS:
        width = _WIDTH[kind[8:]]
        if op.pos < 0 or op.pos + width > n or op.value not in INTERESTING_BY_WIDTH[width]:
            raise InapplicableMutation(kind)
        _put_int(buf, op.pos, width, op.value, op.big_endian)
    elif kind == "chunk-delete":
        if op.length <= 0 or op.pos < 0 or op.pos + op.length > n:
            raise InapplicableMutation(kind)
        del buf[op.pos:op.pos + op.length]
    elif kind == "chunk-duplicate":
        if op.length <= 0 or op.pos < 0 or op.pos + op.length > n or not 0 <= op.dst <= n:
            raise InapplicableMutation(kind)
        if n + op.length > max_size:
            raise InapplicableMutation("result exceeds max input size")
        buf[op.dst:op.dst] = data[op.pos:op.pos + op.length]
    elif kind == "chunk-overwrite":
        if (op.length <= 0 or op.pos < 0 or op.dst < 0
                or op.pos + op.length > n or op.dst + op.length > n):
            raise InapplicableMutation(kind)
        buf[op.dst:op.dst + op.length] = data[op.pos:op.pos + op.length]
    elif kind == "chunk-insert":
        if not op.data or not 0 <= op.pos <= n:
            raise InapplicableMutation(kind)
        if n + len(op.data) > max_size:
            raise InapplicableMutation("result exceeds max input size")
        buf[op.pos:op.pos] = op.data
    else:
        raise InapplicableMutation("splice needs a second input; use splice()")

    out = bytes(buf)
    if out == data:
        raise InapplicableMutation("no-op")
    return out


def mutate(data: bytes, op: MutationOp, rng: RngState | None = None,
           max_size: int = MAX_INPUT_SIZE) -> bytes:
    """Apply ``op`` to ``data``.

    Ops are fully parametrized, so ``rng`` is unused here; it is accepted so
    callers can treat deterministic and havoc ops uniformly.
    """
    del rng
    return apply_op(data, op, max_size)


def splice_at(a: bytes, b: bytes, cut_a: int, cut_b: int, max_size: int = MAX_INPUT_SIZE) -> bytes:
    if not (0 <= cut_a <= len(a) and 0 <= cut_b <= len(b)):
        raise ValueError("cut point out of range")
    return (a[:cut_a] + b[cut_b:])[:max_size]


def splice(a: bytes, b: bytes, rng: RngState, max_size: int = MAX_INPUT_SIZE) -> bytes:
    """Prefix of ``a`` up to a random cut, then the suffix of ``b`` from a random cut."""
    if not a or not b:
        raise ValueError("splice needs two non-empty inputs")
    cut_a = rng.between(0, len(a))
    cut_b = rng.between(0, len(b))
    return splice_at(a, b, cut_a, cut_b, max_size)


def deterministic_ops(length: int) -> Iterator[MutationOp]:
    """The deterministic stage: every walking op at every position, in a fixed order."""
    nbits = 8 * length
    for kind, w in zip(BITFLIP_KINDS, (1, 2, 4)):
        for bit in range(nbits - w + 1):
            yield MutationOp(kind, pos=bit)
    for kind, w in zip(BYTEFLIP_KINDS, (1, 2, 4)):
        for pos in range(length - w + 1):
            yield MutationOp(kind, pos=pos)
    for kind, w in zip(ARITH_KINDS, (1, 2, 4)):
        endians = (False,) if w == 1 else (False, True)
        for pos in range(length - w + 1):
            for be in endians:
                for d in range(1, ARITH_MAX + 1):
                    yield MutationOp(kind, pos=pos, value=d, big_endian=be)
                    yield MutationOp(kind, pos=pos, value=-d, big_endian=be)
    for kind, w in zip(INTEREST_KINDS, (1, 2, 4)):
        endians = (False,) if w == 1 else (False, True)
        for pos in range(length - w + 1):
            for be in endians:
                for v in INTERESTING_BY_WIDTH[w]:
                    yield MutationOp(kind, pos=pos, value=v, big_endian=be)


def deterministic_stage_size(length: int) -> int:
    return sum(1 for _ in deterministic_ops(length))


_HAVOC_KINDS = (
    "bitflip1", "interest8", "interest16", "interest32",
    "arith8", "arith16", "arith32", "byteflip1",
    "chunk-delete", "chunk-delete", "chunk-duplicate", "chunk-insert", "chunk-overwrite",
)


def _chunk_len(rng: RngState, limit: int) -> int:
    # Mostly small chunks, occasionally larger ones, as AFL's choose_block_len.
    if limit <= 1:
        return 1
    tier = rng.below(3)
    cap = (8, 32, 128)[tier]
    return 1 + rng.below(min(cap, limit))


def random_op(rng: RngState, length: int) -> MutationOp:
    """Draw one havoc op for a buffer of ``length`` bytes."""
    if length == 0:
        return MutationOp("chunk-insert", pos=0, data=_insert_block(rng, 1 + rng.below(8)))
    kind = rng.choice(_HAVOC_KINDS)
    if kind == "bitflip1":
        return MutationOp(kind, pos=rng.below(8 * length))
    if kind == "byteflip1":
        return MutationOp(kind, pos=rng.below(length))
    if kind in INTEREST_KINDS:
        w = _WIDTH[kind[8:]]
        if length < w:
            kind, w = "interest8", 1
        return MutationOp(kind, pos=rng.below(length - w + 1),
                          value=rng.choice(INTERESTING_BY_WIDTH[w]), big_endian=rng.coin())
    if kind in ARITH_KINDS:
        w = _WIDTH[kind[5:]]
        if length < w:
            kind, w = "arith8", 1
        delta = 1 + rng.below(ARITH_MAX)
        if rng.coin():
            delta = -delta
        return MutationOp(kind, pos=rng.below(length - w + 1), value=delta, big_endian=rng.coin())
    if kind == "chunk-delete":
        if length < 2:
            return MutationOp("bitflip1", pos=rng.below(8 * length))
        n = _chunk_len(rng, length - 1)
        return MutationOp(kind, pos=rng.below(length - n + 1), length=n)
    if kind == "chunk-duplicate":
        n = _chunk_len(rng, length)
        return MutationOp(kind, pos=rng.below(length - n + 1), length=n, dst=rng.below(length + 1))
    if kind == "chunk-insert":
        n = _chunk_len(rng, max(length, 2))
        return MutationOp(kind, pos=rng.below(length + 1), data=_insert_block(rng, n))
    # chunk-overwrite
    if length < 2:
        return MutationOp("bitflip1", pos=rng.below(8 * length))
    n = _chunk_len(rng, length - 1)
    return MutationOp(kind, pos=rng.below(length - n + 1), length=n, dst=rng.below(length - n + 1))


def _insert_block(rng: RngState, n: int) -> bytes:
    # Constant-filled blocks (often zero) are far more useful than noise for
    # structured formats; AFL makes the same choice for its block inserts.
    if rng.coin(0.75):
        fill = 0 if rng.coin() else rng.below(256)
        return bytes([fill]) * n
    return rng.randbytes(n)


def havoc(data: bytes, rng: RngState, max_size: int = MAX_INPUT_SIZE,
          max_stack_pow2: int = 4) -> bytes:
    """Stack 2..2**max_stack_pow2 random ops onto ``data``; skipped ops are redrawn."""
    stack = 1 << (1 + rng.below(max_stack_pow2))
    out = data
    applied = 0
    attempts = 0
    while applied < stack and attempts < 4 * stack:
        attempts += 1
        op = random_op(rng, len(out))
        try:
            out = apply_op(out, op, max_size)
        except InapplicableMutation:
            continue
        applied += 1
    return out
