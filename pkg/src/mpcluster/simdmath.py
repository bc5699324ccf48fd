"""Bit-exact semantics of the mixed-precision SIMD dot-product datapath.

Lane ``i`` of precision ``p`` occupies bits ``[i*p, i*p + p)`` of a 32-bit
word (lane 0 in the least-significant bits). Operand B is always the
narrower one; when it is narrower than A, only one *slice* of B's lanes
(``lanes(A)`` of them) takes part in a given dot-product.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass
from functools import lru_cache

MASK32 = 0xFFFFFFFF
PRECISIONS = (16, 8, 4, 2)


class SimdError(ValueError):
    """Contract violation in a SIMD helper (bad slice, lane or format)."""


class SignMode(enum.IntEnum):
    SS = 0  # both signed
    UU = 1  # both unsigned
    US = 2  # A unsigned, B signed

    @property
    def a_signed(self) -> bool:
        return self is SignMode.SS

    @property
    def b_signed(self) -> bool:
        return self is not SignMode.UU


def lanes(bits: int) -> int:
    if bits not in PRECISIONS:
        raise SimdError(f"unsupported precision {bits}")
    return 32 // bits


@dataclass(frozen=True)
class SimdFormat:
    a: int
    b: int
    sign: SignMode = SignMode.SS

    def __post_init__(self):
        if self.a not in PRECISIONS or self.b not in PRECISIONS:
            raise SimdError(f"unsupported precision pair {self.a}x{self.b}")
        if self.b > self.a:
            raise SimdError(f"operand B ({self.b}b) wider than operand A ({self.a}b)")
        object.__setattr__(self, "sign", SignMode(self.sign))

    @property
    def slice_count(self) -> int:
        return self.a // self.b

    @property
    def mixed(self) -> bool:
        return self.a != self.b

    def __str__(self):
        return f"{self.a}x{self.b}{self.sign.name}"


def all_formats():
    """The ten (a, b) precision pairs with b <= a."""
    return [(a, b) for a in PRECISIONS for b in PRECISIONS if b <= a]


def to_signed32(x: int) -> int:
    x &= MASK32
    return x - (1 << 32) if x & 0x80000000 else x


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def lane(word: int, bits: int, index: int, signed: bool) -> int:
    v = (word >> (index * bits)) & ((1 << bits) - 1)
    return sext(v, bits) if signed else v


def unpack_lanes(word: int, bits: int, signed: bool) -> list[int]:
    return [lane(word, bits, i, signed) for i in range(32 // bits)]


@lru_cache(maxsize=1 << 16)
def unpack_cached(word: int, bits: int, signed: bool) -> tuple:
    """Memoized :func:`unpack_lanes`; kernels reuse the same words across cores."""
    return tuple(unpack_lanes(word, bits, signed))


def pack_lanes(values, bits: int) -> int:
    mask = (1 << bits) - 1
    word = 0
    for i, v in enumerate(values):
        word |= (v & mask) << (i * bits)
    return word & MASK32


def slice_extend(b_word: int, fmt: SimdFormat, slice_idx: int) -> list[int]:
    """B lanes of slice ``slice_idx``, widened to A's lane width."""
    if not 0 <= slice_idx < fmt.slice_count:
        raise SimdError(f"slice {slice_idx} out of range for {fmt}")
    n = 32 // fmt.a
    start = slice_idx * n
    signed = fmt.sign.b_signed
    return [lane(b_word, fmt.b, start + j, signed) for j in range(n)]


def dotp(a_word: int, b_word: int, fmt: SimdFormat, slice_idx: int = 0) -> int:
    if not 0 <= slice_idx < fmt.slice_count:
        raise SimdError(f"slice {slice_idx} out of range for {fmt}")
    n = 32 // fmt.a
    a_l = unpack_cached(a_word & MASK32, fmt.a, fmt.sign.a_signed)
    b_l = unpack_cached(b_word & MASK32, fmt.b, fmt.sign.b_signed)[slice_idx * n:(slice_idx + 1) * n]
    return to_signed32(sum(map(operator.mul, a_l, b_l)))


def sdotp(a_word: int, b_word: int, fmt: SimdFormat, slice_idx: int, acc: int) -> int:
    return to_signed32(acc + dotp(a_word, b_word, fmt, slice_idx))


def extract(word: int, bits: int, index: int, signed: bool) -> int:
    """Lane ``index`` of ``word`` extended to a 32-bit register value."""
    if not 0 <= index < lanes(bits):
        raise SimdError(f"lane {index} out of range for {bits}-bit lanes")
    return lane(word, bits, index, signed) & MASK32


def pack_byte(dest: int, rs1: int, rs2: int, hi: bool) -> int:
    pair = (rs1 & 0xFF) | ((rs2 & 0xFF) << 8)
    if hi:
        return ((dest & 0x0000FFFF) | (pair << 16)) & MASK32
    return (dest & 0xFFFF0000) | pair


def oracle_dotp(a_lanes, b_lanes, acc: int = 0) -> int:
    """Reference dot-product over already-extended lanes, unbounded then wrapped."""
    if len(a_lanes) != len(b_lanes):
        raise SimdError("lane lists differ in length")
    s = int(acc) + sum(int(x) * int(y) for x, y in zip(a_lanes, b_lanes))
    s %= 1 << 32
    return s - (1 << 32) if s >= 1 << 31 else s
