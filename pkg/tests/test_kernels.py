import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcluster import isa
from mpcluster.asm import assemble
from mpcluster.cluster import ClusterConfig, bank_of, run_program
from mpcluster.kernels.bench import BenchCase, BenchFailure, run_case, run_image
from mpcluster.kernels.gen import UnsupportedKernel, gen_conv, gen_matmul, gen_vecadd, sw_supported
from mpcluster.kernels.golden import (
    ConvSpec, golden_conv2d, golden_matmul, im2col_ref, random_tensors, value_range,
)
from mpcluster.kernels.layout import (
    L1Allocator, LayoutParams, OutOfMemory, max_chunk, min_chunk, misaligned_offset,
    misaligned_padding, misaligned_total, sub_buffer_size,
)
from mpcluster.simdmath import SignMode

PRECS = (16, 8, 4, 2)


class TestLayout:
    @pytest.mark.parametrize("s, lo, hi", [(1, 4, 8), (2, 2, 4), (4, 1, 2)])
    def test_chunk_bounds(self, s, lo, hi):
        assert (min_chunk(s), max_chunk(s)) == (lo, hi)

    def test_bad_element_size(self):
        with pytest.raises(ValueError):
            min_chunk(3)

    def test_im2col_buffer_example(self):
        # 288 bytes: a 3x3x32 column of 8-bit activations
        assert sub_buffer_size(288) == 384
        assert misaligned_total(288) == 6144

    def test_one_byte_buffers(self):
        assert sub_buffer_size(1) == 128 and misaligned_total(1) == 2048
        assert [misaligned_offset(i, 1) for i in range(3)] == [0, 132, 264]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sub_buffer_size(0)

    @given(st.integers(1, 4096))
    def test_sub_buffers_start_on_distinct_banks(self, n):
        base = isa.TCDM_BASE
        banks = [bank_of(base + misaligned_offset(i, n)) for i in range(16)]
        assert banks == list(range(16))
        assert 0 <= misaligned_padding(n) <= 127
        # sub-buffer i (data plus shift) never runs into sub-buffer i+1
        for i in range(15):
            assert misaligned_offset(i, n) + n <= misaligned_offset(i + 1, n)
        assert misaligned_offset(15, n) + n <= misaligned_total(n)

    @given(st.lists(st.integers(0, 600), min_size=1, max_size=20), st.sampled_from([4, 8, 128]))
    def test_allocations_never_overlap(self, sizes, align):
        a = L1Allocator()
        spans = sorted((a.alloc(n, align), n) for n in sizes)
        for (s0, n0), (s1, _) in zip(spans, spans[1:]):
            assert s0 + n0 <= s1
        assert all(s % align == 0 for s, _ in spans)

    def test_out_of_memory_leaves_state(self):
        a = L1Allocator(size=1024)
        a.alloc(1000)
        before = a.used
        with pytest.raises(OutOfMemory):
            a.alloc(100)
        assert a.used == before
        a.alloc(24)

    def test_per_core_layouts(self):
        for layout in ("packed", "aligned", "misaligned"):
            offs = L1Allocator().per_core_alloc(288, layout)
            assert len(offs) == 16
        packed = L1Allocator().per_core_alloc(288, "packed")
        assert [bank_of(b) for b in packed[:2]] == [0, 8]
        mis = L1Allocator().per_core_alloc(288, "misaligned")
        assert [bank_of(b) for b in mis] == list(range(16))

    def test_custom_geometry(self):
        p = LayoutParams(n_cores=8, n_banks=16)
        assert max_chunk(4, p) == 2
        assert sub_buffer_size(10, p) == 64


class TestGolden:
    def test_identity_filter(self):
        spec = ConvSpec(4, 4, 2, 2, K=1)
        x = np.arange(32).reshape(4, 4, 2)
        w = np.array([[[[1, 0]]], [[[0, 1]]]])
        assert np.array_equal(golden_conv2d(x, w, spec), x)

    def test_hand_matmul_8x4(self):
        acts = [[1, 2, 3, 4], [-1, 0, 1, 0]]
        wgts = [[1, 1, 1, 1], [7, -8, 0, 2]]
        assert golden_matmul(acts, wgts).tolist() == [[10, -1], [0, -7]]

    def test_wraps_32_bit(self):
        big = [[2**15] * 2]
        assert golden_matmul(big, big).tolist() == [[-2**31]]

    def test_shape_errors(self):
        spec = ConvSpec(4, 4, 2, 2, K=3)
        with pytest.raises(ValueError):
            golden_conv2d(np.zeros((4, 4, 3)), np.zeros((2, 3, 3, 2)), spec)
        with pytest.raises(ValueError):
            golden_matmul([[1, 2]], [[1, 2, 3]])

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ConvSpec(2, 2, 1, 1, K=3)
        with pytest.raises(ValueError):
            ConvSpec(4, 4, 1, 1, act_bits=3)

    def test_value_ranges(self):
        assert value_range(4, True) == (-8, 7)
        assert value_range(2, False) == (0, 3)

    def test_signedness_follows_operand_roles(self):
        wide_act = ConvSpec(4, 4, 4, 4, act_bits=8, wgt_bits=4, sign=SignMode.US)
        assert (wide_act.act_signed, wide_act.wgt_signed) == (False, True)
        wide_wgt = ConvSpec(4, 4, 4, 4, act_bits=4, wgt_bits=8, sign=SignMode.UU)
        assert (wide_wgt.act_signed, wide_wgt.wgt_signed) == (False, False)

    @given(h=st.integers(3, 6), w=st.integers(3, 6), cin=st.integers(1, 4),
           cout=st.integers(1, 4), k=st.sampled_from([1, 3]), pad=st.integers(0, 1),
           seed=st.integers(0, 2**16))
    @settings(max_examples=60, deadline=None)
    def test_direct_conv_equals_im2col_matmul(self, h, w, cin, cout, k, pad, seed):
        spec = ConvSpec(h, w, cin, cout, K=k, pad=pad, act_bits=4, wgt_bits=2)
        x, wt = random_tensors(spec, np.random.default_rng(seed))
        via_matmul = golden_matmul(im2col_ref(x, spec), wt.reshape(cout, -1))
        direct = golden_conv2d(x, wt, spec).reshape(-1, cout)
        assert np.array_equal(direct, via_matmul)


SMALL = dict(H=8, W=4, C_in=16, C_out=8, K=3, pad=1)


def build_and_run(spec, seed=0, cfg=None, **kw):
    x, w = random_tensors(spec, np.random.default_rng(seed))
    img = gen_conv(spec, x, w, golden_conv2d(x, w, spec), **kw)
    cl = run_program(assemble(img.source), cfg)
    return img, cl


ALL_CASES = [(a, w, mode, path)
             for a, w in itertools.product(PRECS, PRECS)
             for mode in ("MIMD", "VLEM")
             for path in ("hw", "sw")
             if path == "hw" or sw_supported(ConvSpec(**SMALL, act_bits=a, wgt_bits=w))]


class TestConvKernels:
    @pytest.mark.parametrize("a, w, mode, path", ALL_CASES)
    def test_bit_exact(self, a, w, mode, path):
        spec = ConvSpec(**SMALL, act_bits=a, wgt_bits=w)
        img, cl = build_and_run(spec, seed=a * 100 + w, mode=mode, path=path)
        ok, msg = img.check(cl)
        assert ok, msg
        assert cl.metrics.macs == spec.macs
        if mode == "VLEM":
            assert cl.metrics.vlem_entries == cl.metrics.vlem_exits > 0

    @pytest.mark.parametrize("sign", [SignMode.UU, SignMode.US])
    @pytest.mark.parametrize("a, w", [(8, 4), (4, 2), (8, 8)])
    def test_sign_modes(self, a, w, sign):
        spec = ConvSpec(**SMALL, act_bits=a, wgt_bits=w, sign=sign)
        img, cl = build_and_run(spec, seed=7)
        assert img.check(cl)[0]

    def test_us_with_narrow_activations_rejected(self):
        spec = ConvSpec(**SMALL, act_bits=4, wgt_bits=8, sign=SignMode.US)
        with pytest.raises(UnsupportedKernel):
            build_and_run(spec)

    def test_sw_rejects_mixed_16_bit(self):
        with pytest.raises(UnsupportedKernel):
            build_and_run(ConvSpec(**SMALL, act_bits=16, wgt_bits=8), path="sw")

    def test_shape_constraints(self):
        with pytest.raises(UnsupportedKernel):
            build_and_run(ConvSpec(6, 6, 16, 8, K=3, pad=1))      # 36 pixels
        with pytest.raises(UnsupportedKernel):
            build_and_run(ConvSpec(8, 4, 16, 6, K=3, pad=1))      # C_out not a multiple of 4

    @pytest.mark.parametrize("layout", ["packed", "aligned", "misaligned"])
    def test_layouts_agree(self, layout):
        spec = ConvSpec(**SMALL, act_bits=8, wgt_bits=4)
        img, cl = build_and_run(spec, layout=layout)
        assert img.check(cl)[0]

    def test_misaligned_layout_removes_conflicts(self):
        spec = ConvSpec(**SMALL)
        _, packed = build_and_run(spec, layout="packed")
        _, mis = build_and_run(spec, layout="misaligned")
        assert mis.metrics.bank_conflict_stall_cycles < packed.metrics.bank_conflict_stall_cycles
        assert mis.metrics.cycles < packed.metrics.cycles

    def test_weight_loads_broadcast(self):
        spec = ConvSpec(**SMALL, act_bits=8, wgt_bits=4)
        img, on = build_and_run(spec)
        _, off = build_and_run(spec, cfg=ClusterConfig(broadcast=False))
        assert img.check(off)[0]
        assert on.metrics.broadcasts > 0 and off.metrics.broadcasts == 0
        assert off.metrics.cycles > on.metrics.cycles

    def test_sw_overhead_six_instructions_per_dotp(self):
        spec = ConvSpec(**SMALL, act_bits=8, wgt_bits=4, pixel_block=1)
        _, hw = build_and_run(spec, path="hw")
        _, sw = build_and_run(spec, path="sw")
        dotps = sum(sw.act.dotp)
        assert dotps == sum(hw.act.dotp)
        extra = sw.metrics.instructions_retired - hw.metrics.instructions_retired
        assert extra == 6 * dotps

    def test_matmul_wrapper(self):
        rng = np.random.default_rng(3)
        acts = rng.integers(-8, 8, size=(32, 32))
        wgts = rng.integers(-2, 2, size=(4, 32))
        img = gen_matmul(32, 32, 4, acts, wgts, golden_matmul(acts, wgts),
                         act_bits=4, wgt_bits=2, sign=SignMode.SS, pixel_block=2)
        cl = run_program(assemble(img.source))
        assert img.check(cl)[0]

    def test_check_detects_corruption(self):
        spec = ConvSpec(**SMALL)
        img, cl = build_and_run(spec)
        cl.write(img.out_addr[0], cl.read(img.out_addr[0]) ^ 1)
        assert not img.check(cl)[0]


class TestVecAdd:
    @pytest.mark.parametrize("s", [1, 2, 4])
    def test_chunk_law(self, s):
        for chunk in (1, 2, 4, 8, 16):
            n = 16 * chunk * 4
            if (n * s) % 4:
                continue
            img = gen_vecadd(n, chunk, s)
            cl = run_program(assemble(img.source))
            assert img.check(cl)[0]
            stalls = cl.metrics.bank_conflict_stall_cycles
            if min_chunk(s) <= chunk <= max_chunk(s):
                assert stalls == 0, (s, chunk)
            else:
                assert stalls > 0, (s, chunk)

    def test_mimd_mode(self):
        img = gen_vecadd(256, 2, 2, mode="MIMD")
        cl = run_program(assemble(img.source))
        assert img.check(cl)[0] and cl.metrics.vlem_entries == 0

    def test_rejects_bad_shapes(self):
        with pytest.raises(UnsupportedKernel):
            gen_vecadd(100, 2, 4)
        with pytest.raises(UnsupportedKernel):
            gen_vecadd(64, 1, 3)


class TestBenchRunner:
    def test_timeout_reported_as_failure(self):
        case = BenchCase("conv", ConvSpec(**SMALL))
        res = run_case(case, max_cycles=200)
        assert not res.ok and res.failure == "timeout"

    def test_divergence_reported(self):
        img = _Image("csrrs t0, mhartid, x0\nvlem.on\nbeq t0, x0, l\nnop\nl:\nvlem.off")
        res = run_image(img)
        assert res.failure == "divergence" and not res.ok
        with pytest.raises(BenchFailure):
            res.raise_for_failure()

    def test_mismatch_reported(self):
        res = run_image(_Image("nop", ok=False))
        assert res.failure == "mismatch"

    def test_vecadd_case(self):
        res = run_case(BenchCase("vecadd", n=256, chunk=2, s=2))
        assert res.ok and res.verified and res.macs == 0


class _Image:
    def __init__(self, source, ok=True):
        self.source, self.ok, self.name = source, ok, "tiny"

    def check(self, cluster):
        return self.ok, "ok" if self.ok else "wrong"
