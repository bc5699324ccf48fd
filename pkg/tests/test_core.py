import pytest
from hypothesis import given, settings, strategies as st

from mpcluster import isa
from mpcluster.asm import assemble
from mpcluster.cluster import ClusterConfig, run_program
from mpcluster.core import Core, SimTrap, decode_fmt, fmt_word
from mpcluster.simdmath import (
    SignMode, SimdFormat, all_formats, pack_lanes, sdotp, to_signed32,
)


def step(core, source):
    """Assemble ``source`` at the core's pc and issue it; returns the cost."""
    (ins,) = assemble(source).text
    return core.issue(ins)


def fresh(pc=isa.L2_BASE):
    core = Core(3)
    core.reset(pc)
    return core


def single_core(source):
    return run_program(assemble(source), ClusterConfig(n_cores=1))


class TestTiming:
    def test_addi_one_cycle(self):
        c = fresh()
        assert step(c, "addi x5, x0, 42") == 1
        assert c.x(5) == 42 and c.pc == isa.L2_BASE + 4 and c.retired == 1

    def test_x0_stays_zero(self):
        c = fresh()
        step(c, "addi x0, x0, 7")
        assert c.x(0) == 0

    def test_branch_costs(self):
        c = fresh()
        assert step(c, "beq x0, x0, 0x1c000100") == 2
        assert c.pc == 0x1C000100
        c = fresh()
        c.set(1, 1)
        assert step(c, "beq x1, x0, 0x1c000100") == 1
        assert c.pc == isa.L2_BASE + 4

    def test_jal_links(self):
        c = fresh()
        assert step(c, "jal x1, 0x1c000040") == 2
        assert c.x(1) == isa.L2_BASE + 4

    @pytest.mark.parametrize("n, k", [(3, 1), (5, 4), (10, 2)])
    def test_hardware_loop_zero_overhead(self, n, k):
        body = "\n".join("addi x6, x6, 1" for _ in range(k))

        def cycles(count):
            src = f"li x5, {count}\nlp.setup 0, x5, end\n{body}\nend:\nnop"
            cl = single_core(src)
            assert cl.cores[0].x(6) == count * k
            return cl.metrics.cycles

        # the per-iteration cost is exactly the body length
        assert cycles(2 * n) - cycles(n) == n * k

    def test_nested_hardware_loops(self):
        src = """
        li x5, 3
        li x7, 4
        lp.setup 1, x5, outer
        lp.setup 0, x7, inner
        addi x6, x6, 1
        inner:
        addi x8, x8, 1
        outer:
        nop
        """
        cl = single_core(src)
        assert cl.cores[0].x(6) == 12 and cl.cores[0].x(8) == 3

    def test_loop_end_must_follow_start(self):
        c = fresh()
        with pytest.raises(SimTrap):
            step(c, f"lp.setup 0, x5, {isa.L2_BASE:#x}")


class TestCsr:
    def test_fmt_word_encoding(self):
        assert fmt_word(16, 16) == 0
        assert fmt_word(8, 4, SignMode.SS) == 0b1001
        assert fmt_word(2, 2, SignMode.US) == 0b101111
        for a, b in all_formats():
            for s in SignMode:
                f = decode_fmt(fmt_word(a, b, s))
                assert (f.a, f.b, f.sign) == (a, b, s)

    def test_write_read_simd_fmt(self):
        c = fresh()
        c.set(5, fmt_word(8, 2))
        step(c, "csrrw x6, simd_fmt, x5")
        assert c.x(6) == fmt_word(8, 8)         # reset value
        assert c.read_csr(isa.CSR_SIMD_FMT) == fmt_word(8, 2)
        assert (c.fmt.a, c.fmt.b) == (8, 2)

    def test_b_wider_than_a_traps(self):
        c = fresh()
        c.set(5, fmt_word(8, 8) & ~0b11 | 0b11)  # A=2, B=8
        with pytest.raises(SimTrap):
            step(c, "csrrw x0, simd_fmt, x5")

    def test_reserved_sign_traps(self):
        c = fresh()
        c.set(5, 0b110101)
        with pytest.raises(SimTrap):
            step(c, "csrrw x0, simd_fmt, x5")

    def test_mhartid(self):
        c = fresh()
        step(c, "csrrs x7, mhartid, x0")
        assert c.x(7) == 3
        with pytest.raises(SimTrap):
            step(c, "csrrwi x0, mhartid, 1")

    def test_unknown_csr_traps(self):
        c = fresh()
        with pytest.raises(SimTrap):
            step(c, "csrrs x7, 0x123, x0")

    def test_set_and_clear_bits(self):
        c = fresh()
        c.set(5, 0x4)
        step(c, "csrrwi x0, mp_macctl, 3")
        step(c, "csrrs x0, mp_macctl, x5")
        assert c.macctl == 7
        step(c, "csrrc x0, mp_macctl, x5")
        assert c.macctl == 3


def set_fmt(core, a, b, sign=SignMode.SS):
    core.write_csr(isa.CSR_SIMD_FMT, fmt_word(a, b, sign))


class TestMpc:
    def test_slice_advances_after_target(self):
        c = fresh()
        set_fmt(c, 8, 4)
        c.write_csr(isa.CSR_MP_MACCTL, 2)
        slices = []
        for _ in range(6):
            slices.append(c.slice)
            c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert slices == [0, 0, 1, 1, 0, 0]

    def test_8x2_target4_cycles_after_16(self):
        c = fresh()
        set_fmt(c, 8, 2)
        c.write_csr(isa.CSR_MP_MACCTL, 4)
        seen = []
        for _ in range(16):
            seen.append(c.slice)
            c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert seen == [0] * 4 + [1] * 4 + [2] * 4 + [3] * 4
        assert c.slice == 0 and c.mac_counter == 0

    def test_uniform_format_does_not_advance(self):
        c = fresh()
        set_fmt(c, 8, 8)
        for _ in range(5):
            c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert c.mp_state == 0

    def test_mp_state_layout_and_override(self):
        c = fresh()
        set_fmt(c, 8, 4)
        c.write_csr(isa.CSR_MP_MACCTL, 4)
        c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert c.read_csr(isa.CSR_MP_STATE) == 1
        c.write_csr(isa.CSR_MP_STATE, 1 << 16)
        assert (c.slice, c.mac_counter) == (1, 0)

    def test_worked_example_slice1(self):
        a, b = 0x04030201, 0xFFFF1111
        c = fresh()
        set_fmt(c, 8, 4)
        assert to_signed32(c.exec_virtual_simd("pv.dotp", a, b)) == 10
        assert to_signed32(c.exec_virtual_simd("pv.dotp", a, b)) == -10

    def test_fmt_change_changes_result_and_resets_state(self):
        a, b = 0x04030201, 0xFFFF1111
        c = fresh()
        set_fmt(c, 8, 4)
        c.exec_virtual_simd("pv.dotp", a, b)
        assert c.slice == 1
        set_fmt(c, 8, 8)
        assert c.mp_state == 0
        assert to_signed32(c.exec_virtual_simd("pv.dotp", a, b)) == 17 + 2 * 17 - 3 - 4

    def test_macctl_zero_behaves_as_one(self):
        c = fresh()
        set_fmt(c, 8, 4)
        c.write_csr(isa.CSR_MP_MACCTL, 0)
        c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert c.slice == 1 and c.macctl_zero_warnings == 1

    def test_mac_count(self):
        c = fresh()
        set_fmt(c, 4, 2)
        c.exec_virtual_simd("pv.sdotp", 0, 0)
        assert c.macs == 8 and c.dotp_by_prec[4] == 1

    @given(fmt=st.sampled_from(all_formats()), sign=st.sampled_from(list(SignMode)),
           data=st.data())
    @settings(max_examples=200, deadline=None)
    def test_hw_slicing_matches_sw_slicing(self, fmt, sign, data):
        """A run of dot products with MPC slicing equals explicit per-slice calls."""
        a, b = fmt
        target = data.draw(st.integers(1, 4))
        ops = data.draw(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1)),
                                 min_size=1, max_size=12))
        c = fresh()
        set_fmt(c, a, b, sign)
        c.write_csr(isa.CSR_MP_MACCTL, target)
        f = SimdFormat(a, b, sign)
        acc_hw = acc_sw = 0
        for k, (aw, bw) in enumerate(ops):
            acc_hw = c.exec_virtual_simd("pv.sdotp" + {0: "", 1: "u", 2: "us"}[int(sign)],
                                         aw, bw, acc_hw)
            slc = (k // target) % f.slice_count if f.mixed else 0
            acc_sw = sdotp(aw, bw, f, slc, to_signed32(acc_sw)) & 0xFFFFFFFF
        assert acc_hw == acc_sw


class TestMemoryIssue:
    def test_post_increment_load_request(self):
        c = fresh()
        c.set(9, isa.TCDM_BASE + 8)
        req = step(c, "p.lw x8, 4(x9!)")
        assert req.addr == isa.TCDM_BASE + 8 and req.post_value == isa.TCDM_BASE + 12
        c.complete(req, 0x1234)
        assert c.x(8) == 0x1234 and c.x(9) == isa.TCDM_BASE + 12

    def test_misaligned_load_traps(self):
        c = fresh()
        c.set(9, isa.TCDM_BASE + 2)
        with pytest.raises(SimTrap):
            step(c, "lw x8, 0(x9)")

    def test_signed_byte_load(self):
        c = fresh()
        c.set(9, isa.TCDM_BASE)
        req = step(c, "lb x8, 0(x9)")
        c.complete(req, 0xFF)
        assert c.x(8) == 0xFFFFFFFF

    def test_end_to_end_dotp_program(self):
        src = """
        li x5, 0x09
        csrrw x0, simd_fmt, x5
        li x6, 0x04030201
        li x7, 0xFFFF1111
        pv.sdotp x8, x6, x7
        pv.sdotp x8, x6, x7
        pv.sdotp x8, x6, x7
        """
        cl = single_core(src)
        assert to_signed32(cl.cores[0].x(8)) == 10
        assert cl.metrics.macs == 12


def test_pack_lanes_feeds_dotp():
    c = fresh()
    set_fmt(c, 16, 16)
    a = pack_lanes([-3, 7], 16)
    assert to_signed32(c.exec_virtual_simd("pv.dotp", a, a)) == 9 + 49
