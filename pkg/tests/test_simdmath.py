import random

import pytest
from hypothesis import given, strategies as st

from mpcluster.simdmath import (
    SignMode, SimdError, SimdFormat, all_formats, dotp, extract, lanes,
    oracle_dotp, pack_byte, sdotp, slice_extend,
)

words = st.integers(0, 0xFFFFFFFF)


def expand(word, bits, signed):
    # independent of the datapath: walk a binary string, MSB lane last
    s = format(word, "032b")[::-1]
    out = []
    for i in range(0, 32, bits):
        v = int(s[i:i + bits][::-1], 2)
        if signed and v >= 1 << (bits - 1):
            v -= 1 << bits
        out.append(v)
    return out


def oracle_for(a, b, fmt, slc, acc):
    n = 32 // fmt.a
    al = expand(a, fmt.a, fmt.sign == SignMode.SS)
    bl = expand(b, fmt.b, fmt.sign != SignMode.UU)[slc * n:(slc + 1) * n]
    return oracle_dotp(al, bl, acc)


@pytest.mark.parametrize("bits,n", [(8, 4), (2, 16), (16, 2), (4, 8)])
def test_lanes(bits, n):
    assert lanes(bits) == n


def test_format_rejects_wide_b():
    with pytest.raises(SimdError):
        SimdFormat(2, 8)
    assert len(all_formats()) == 10


def test_slice_extend_examples():
    assert slice_extend(0x000000F1, SimdFormat(8, 4), 0) == [1, -1, 0, 0]
    assert slice_extend(0xAAAAAAAA, SimdFormat(8, 2), 3) == [-2, -2, -2, -2]
    assert slice_extend(0x80FF7F01, SimdFormat(8, 8), 0) == [1, 127, -1, -128]
    with pytest.raises(SimdError):
        slice_extend(0, SimdFormat(8, 4), 2)


A_1234 = 0x04030201
B_MIX = 0xFFFF1111  # nibbles 1,1,1,1,-1,-1,-1,-1


def test_dotp_examples():
    fmt = SimdFormat(8, 4, SignMode.SS)
    assert dotp(A_1234, B_MIX, fmt, 0) == 10
    assert dotp(A_1234, B_MIX, fmt, 1) == -10
    assert dotp(0x01010101, 0x01010101, SimdFormat(8, 8, SignMode.UU)) == 4
    for a, b in all_formats():
        assert dotp(0x12345678, 0, SimdFormat(a, b), 0) == 0


def test_sdotp_examples():
    fmt = SimdFormat(8, 4)
    assert sdotp(A_1234, B_MIX, fmt, 0, 100) == 110
    assert sdotp(0, B_MIX, fmt, 1, 77) == 77
    assert sdotp(0x00000001, 0x00000001, SimdFormat(8, 8), 0, 0x7FFFFFFF) == -0x80000000


def test_us_mode_signedness():
    fmt = SimdFormat(8, 8, SignMode.US)
    # A lane 0xFF is 255 (unsigned), B lane 0xFF is -1 (signed)
    assert dotp(0x000000FF, 0x000000FF, fmt) == -255


def test_extract_examples():
    assert extract(0x0000000F, 4, 0, True) == 0xFFFFFFFF
    assert extract(0x0000000F, 4, 0, False) == 0xF
    assert extract(0xABCD1234, 8, 2, False) == 0xCD
    with pytest.raises(SimdError):
        extract(0, 8, 4, False)


def test_pack_byte_examples():
    assert pack_byte(0, 0xAB, 0xCD, hi=False) == 0x0000CDAB
    assert pack_byte(0xFFFF0000, 0xAB, 0xCD, hi=False) == 0xFFFFCDAB
    assert pack_byte(0x0000BEEF, 0x12, 0x34, hi=True) == 0x3412BEEF


def test_oracle_basics():
    assert oracle_dotp([1, 2], [3, 4], 0) == 11
    assert oracle_dotp([], [], 5) == 5
    with pytest.raises(SimdError):
        oracle_dotp([1], [], 0)


@pytest.mark.parametrize("a,b", all_formats())
@pytest.mark.parametrize("sign", list(SignMode))
def test_sdotp_matches_oracle(a, b, sign):
    rng = random.Random(a * 100 + b * 10 + sign)
    fmt = SimdFormat(a, b, sign)
    for _ in range(200):
        x, y = rng.getrandbits(32), rng.getrandbits(32)
        acc = rng.randint(-2**31, 2**31 - 1)
        slc = rng.randrange(fmt.slice_count)
        assert sdotp(x, y, fmt, slc, acc) == oracle_for(x, y, fmt, slc, acc)


@given(words, words)
def test_uniform_independent_of_slice_and_commutative(x, y):
    for bits in (16, 8, 4, 2):
        fmt = SimdFormat(bits, bits, SignMode.SS)
        assert fmt.slice_count == 1
        assert dotp(x, y, fmt) == dotp(y, x, fmt)


@given(words, words, st.sampled_from(all_formats()))
def test_negating_b_negates_result(x, y, ab):
    a, b = ab
    fmt = SimdFormat(a, b, SignMode.SS)
    bl = expand(y, b, True)
    minval = -(1 << (b - 1))
    bl = [0 if v == minval else v for v in bl]  # skip asymmetric minimum
    mask = (1 << b) - 1
    pos = sum((v & mask) << (i * b) for i, v in enumerate(bl))
    neg = sum((-v & mask) << (i * b) for i, v in enumerate(bl))
    for s in range(fmt.slice_count):
        r = dotp(x, neg, fmt, s)
        assert r == oracle_dotp([0], [0], -dotp(x, pos, fmt, s))


@given(words)
def test_extract_pack_round_trip(w):
    e = [extract(w, 8, i, False) for i in range(4)]
    lo = pack_byte(0, e[0], e[1], hi=False)
    full = pack_byte(lo, e[2], e[3], hi=True)
    assert full == w
