"""Assembly generators for parallel convolution / matmul and vector-add kernels.

Convolution kernels follow the usual im2col + 4x2 (or 4x1) register-blocked
matmul structure: every core owns a contiguous range of output pixels, copies
the receptive fields of ``pixel_block`` pixels into a private im2col buffer,
then computes four output channels at a time against weights shared by all
cores.  In lockstep mode only the matmul runs in lockstep; each pixel group is
bracketed by ``barrier``/``vlem.on`` ... ``vlem.off`` so that the im2col copy
(whose cost differs between cores at tensor borders) runs in MIMD.

Two inner-loop flavours exist:

* ``path="hw"`` uses the virtual SIMD instructions with the mixed-precision
  controller, so sub-byte operands are consumed directly.
* ``path="sw"`` models a core with 16/8-bit SIMD only: sub-byte activations
  are widened to 8 bits during im2col and sub-byte weights are widened in the
  inner loop with four ``p.extract`` and two pack instructions per 8-bit word.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import isa
from ..core import fmt_word
from ..simdmath import SignMode, pack_lanes
from .golden import ConvSpec
from .layout import L1Allocator

N_CORES = 16
MODES = ("MIMD", "VLEM")
PATHS = ("hw", "sw")
LAYOUTS = ("packed", "aligned", "misaligned")
DOTP_OP = {SignMode.SS: "pv.sdotp", SignMode.UU: "pv.sdotpu", SignMode.US: "pv.sdotpus"}

# register plan
R_ID, R_GRP, R_PIX, R_BUF, R_OUT, R_TMP = "x5", "x1", "x2", "x3", "x4", "x31"
R_WP = ("x6", "x7", "x8", "x9")
R_AP = ("x10", "x11")
R_X = ("x12", "x13", "x14", "x15")
R_PACK = "x30"
R_ACC = tuple(f"x{16 + i}" for i in range(8))   # acc[j * 4 + c]
R_AW = ("x24", "x25")
R_WW = ("x26", "x27", "x28", "x29")


class UnsupportedKernel(ValueError):
    """The requested shape/format/path combination cannot be generated."""


@dataclass
class KernelImage:
    """Generated source plus what is needed to check its result."""

    name: str
    source: str
    spec: ConvSpec
    mode: str
    path: str
    layout: str
    expected: np.ndarray            # (P, C_out) int64
    out_addr: list                   # address of pixel p's C_out words
    macs: int
    meta: dict = field(default_factory=dict)

    def check(self, cluster) -> tuple[bool, str]:
        c_out = self.spec.C_out
        for p, addr in enumerate(self.out_addr):
            got = [v - (1 << 32) if v >= 1 << 31 else v for v in cluster.read_words(addr, c_out)]
            want = [int(v) for v in self.expected[p]]
            if got != want:
                ch = next(i for i in range(c_out) if got[i] != want[i])
                return False, f"pixel {p} channel {ch}: got {got[ch]}, expected {want[ch]}"
        return True, "ok"


def sw_supported(spec: ConvSpec) -> bool:
    return max(spec.act_bits, spec.wgt_bits) <= 8 or spec.act_bits == spec.wgt_bits == 16


def pack_elements(values, bits) -> bytes:
    """Little-endian lane packing of a flat element sequence into whole words."""
    per = 32 // bits
    vals = [int(v) for v in values]
    if len(vals) % per:
        raise UnsupportedKernel(f"{len(vals)} elements do not fill whole {bits}-bit words")
    out = bytearray()
    for i in range(0, len(vals), per):
        out += pack_lanes(vals[i:i + per], bits).to_bytes(4, "little")
    return bytes(out)


def data_block(addr: int, payload: bytes) -> list[str]:
    lines = [f".data .l1 0x{addr:08x}"]
    words = [int.from_bytes(payload[i:i + 4], "little") for i in range(0, len(payload), 4)]
    for i in range(0, len(words), 8):
        lines.append("    .word " + ", ".join(f"0x{w:08x}" for w in words[i:i + 8]))
    return lines


class _Emitter:
    def __init__(self):
        self.lines = []
        self.n_labels = 0

    def __call__(self, text):
        self.lines.append("    " + text)

    def label(self, name):
        self.lines.append(f"{name}:")

    def fresh(self, stem):
        self.n_labels += 1
        return f"{stem}_{self.n_labels}"

    def li(self, reg, value):
        self(f"li {reg}, {value}")

    def add_const(self, rd, rs, value, tmp=R_TMP):
        if -2048 <= value <= 2047:
            self(f"addi {rd}, {rs}, {value}")
        else:
            self.li(tmp, value)
            self(f"add {rd}, {rs}, {tmp}")


def _check_shape(spec: ConvSpec, path: str, mode: str, layout: str):
    if mode not in MODES:
        raise UnsupportedKernel(f"mode must be one of {MODES}")
    if path not in PATHS:
        raise UnsupportedKernel(f"path must be one of {PATHS}")
    if layout not in LAYOUTS:
        raise UnsupportedKernel(f"layout must be one of {LAYOUTS}")
    if path == "sw" and not sw_supported(spec):
        raise UnsupportedKernel("the software path only handles operands of at most 8 bits "
                                "or uniform 16-bit")
    if spec.act_bits < spec.wgt_bits and spec.sign == SignMode.US:
        raise UnsupportedKernel("unsigned weights with signed activations are not expressible "
                                "when activations are the narrower operand")
    if (spec.C_in * spec.act_bits) % 32 or (spec.C_in * spec.wgt_bits) % 32:
        raise UnsupportedKernel("C_in * precision must be a multiple of 32 bits")
    if spec.C_out % 4:
        raise UnsupportedKernel("C_out must be a multiple of 4")
    if spec.pixels % (N_CORES * spec.pixel_block):
        raise UnsupportedKernel(f"{spec.pixels} output pixels do not split evenly over "
                                f"{N_CORES} cores in blocks of {spec.pixel_block}")


def _formats(spec: ConvSpec, path: str):
    """(A bits, B bits, acts-are-A, effective act bits in the im2col buffer)."""
    pa, pw = spec.act_bits, spec.wgt_bits
    if path == "sw":
        eff_a = 16 if pa == 16 else 8
        return eff_a, eff_a, True, eff_a
    if pa >= pw:
        return pa, pw, True, pa
    return pw, pa, False, pa


def _inner_body(e: _Emitter, spec: ConvSpec, path: str, a_bits, b_bits, acts_are_a, op):
    pb = spec.pixel_block
    load_w = [f"p.lw {R_WW[c]}, 4({R_WP[c]}!)" for c in range(4)]
    load_a = [f"p.lw {R_AW[j]}, 4({R_AP[j]}!)" for j in range(pb)]

    def macs(wregs):
        for c in range(4):
            for j in range(pb):
                a, b = (R_AW[j], wregs[c]) if acts_are_a else (wregs[c], R_AW[j])
                e(f"{op} {R_ACC[j * 4 + c]}, {a}, {b}")

    if path == "sw" and spec.wgt_bits < a_bits:
        # widen slice s of every weight word to 8-bit lanes, then uniform 8x8 dotps
        ext = "p.extract" if spec.wgt_signed else "p.extractu"
        wb = spec.wgt_bits
        for ins in load_w:
            e(ins)
        for s in range(8 // wb):
            for ins in load_a:
                e(ins)
            for c in range(4):
                for k in range(4):
                    e(f"{ext} {R_X[k]}, {R_WW[c]}, {wb}, {4 * s + k}")
                e(f"pv.packlo.b {R_PACK}, {R_X[0]}, {R_X[1]}")
                e(f"pv.packhi.b {R_PACK}, {R_X[2]}, {R_X[3]}")
                for j in range(pb):
                    e(f"{op} {R_ACC[j * 4 + c]}, {R_AW[j]}, {R_PACK}")
        return
    slices = a_bits // b_bits
    if acts_are_a:
        for ins in load_w:
            e(ins)
        for _ in range(slices):
            for ins in load_a:
                e(ins)
            macs(R_WW)
    else:
        for ins in load_a:
            e(ins)
        for _ in range(slices):
            for ins in load_w:
                e(ins)
            macs(R_WW)


def _im2col(e: _Emitter, spec: ConvSpec, in_base, col_bytes, unpack_bits, act_signed):
    """Copy (or widen to 8 bits) the receptive fields of pb pixels into the core buffer."""
    pix_bytes = spec.C_in * spec.act_bits // 8
    row_words = spec.K * pix_bytes // 4
    row_stride = spec.Wp * pix_bytes
    for j in range(spec.pixel_block):
        e(f"addi {R_X[0]}, {R_PIX}, {j}")
        e.li(R_X[1], spec.Wo)
        e(f"div {R_X[2]}, {R_X[0]}, {R_X[1]}")
        e(f"rem {R_X[3]}, {R_X[0]}, {R_X[1]}")
        e.li(R_X[1], spec.Wp)
        e(f"mul {R_X[2]}, {R_X[2]}, {R_X[1]}")
        e(f"add {R_X[2]}, {R_X[2]}, {R_X[3]}")
        e.li(R_X[1], pix_bytes)
        e(f"mul {R_X[2]}, {R_X[2]}, {R_X[1]}")
        e.li(R_AP[1], in_base)
        e(f"add {R_AP[1]}, {R_AP[1]}, {R_X[2]}")
        e.add_const(R_AP[0], R_BUF, j * col_bytes)
        e.li(R_WW[0], row_stride)
        kh_end, cp_end = e.fresh(".Lkh"), e.fresh(".Lcp")
        e.li(R_TMP, spec.K)
        e(f"lp.setup 1, {R_TMP}, {kh_end}")
        e(f"mv {R_X[0]}, {R_AP[1]}")
        e.li(R_TMP, row_words)
        e(f"lp.setup 0, {R_TMP}, {cp_end}")
        e(f"p.lw {R_X[1]}, 4({R_X[0]}!)")
        if unpack_bits is None:
            e(f"p.sw {R_X[1]}, 4({R_AP[0]}!)")
        else:
            ext = "p.extract" if act_signed else "p.extractu"
            tmp = (R_X[2], R_X[3], R_AW[0], R_AW[1])
            for q in range(8 // unpack_bits):
                for k in range(4):
                    e(f"{ext} {tmp[k]}, {R_X[1]}, {unpack_bits}, {4 * q + k}")
                e(f"pv.packlo.b {R_PACK}, {tmp[0]}, {tmp[1]}")
                e(f"pv.packhi.b {R_PACK}, {tmp[2]}, {tmp[3]}")
                e(f"p.sw {R_PACK}, 4({R_AP[0]}!)")
        e.label(cp_end)
        e(f"add {R_AP[1]}, {R_AP[1]}, {R_WW[0]}")
        e.label(kh_end)


def _matmul_group(e: _Emitter, spec: ConvSpec, path, w_base, w_row, col_bytes,
                  a_bits, b_bits, acts_are_a, op, step_elems):
    """Compute C_out channels of the current pixel group from the im2col buffer."""
    pb = spec.pixel_block
    e.li(R_WP[0], w_base)
    for c in range(1, 4):
        e.add_const(R_WP[c], R_WP[c - 1], w_row)
    co_end, k_end = e.fresh(".Lco"), e.fresh(".Lk")
    e.li(R_TMP, spec.C_out // 4)
    e(f"lp.setup 1, {R_TMP}, {co_end}")
    for r in R_ACC[:4 * pb]:
        e(f"addi {r}, x0, 0")
    for j in range(pb):
        e.add_const(R_AP[j], R_BUF, j * col_bytes)
    e.li(R_TMP, spec.k_el // step_elems)
    e(f"lp.setup 0, {R_TMP}, {k_end}")
    _inner_body(e, spec, path, a_bits, b_bits, acts_are_a, op)
    e.label(k_end)
    if pb == 1:
        for c in range(4):
            e(f"p.sw {R_ACC[c]}, 4({R_OUT}!)")
    else:
        stride = spec.C_out * 4
        for j in range(pb):
            for c in range(4):
                e(f"sw {R_ACC[j * 4 + c]}, {j * stride + 4 * c}({R_OUT})")
        e(f"addi {R_OUT}, {R_OUT}, 16")
    e.li(R_TMP, 3 * w_row)
    for c in range(4):
        e(f"add {R_WP[c]}, {R_WP[c]}, {R_TMP}")
    e.label(co_end)
    if pb == 2:
        # skip the second pixel's row, already written through the offset
        e.add_const(R_OUT, R_OUT, spec.C_out * 4)


def gen_conv(spec: ConvSpec, x, w, expected, *, mode="VLEM", path="hw", layout="misaligned",
             im2col=True, name=None) -> KernelImage:
    """Assemble-ready source for one convolution layer.

    With ``im2col=False`` the layer must be a 1x1 convolution (a matmul): the
    activation rows are placed directly in the per-core buffers, the whole
    computation forms a single lockstep region, and no copy phase runs.
    """
    _check_shape(spec, path, mode, layout)
    if not im2col and spec.K != 1:
        raise UnsupportedKernel("im2col=False requires a 1x1 filter")
    pb = spec.pixel_block
    ppc = spec.pixels // N_CORES
    a_bits, b_bits, acts_are_a, buf_bits = _formats(spec, path)
    step_elems = 32 // b_bits if path == "hw" else (
        32 // min(spec.wgt_bits, a_bits) if spec.wgt_bits < a_bits else 32 // a_bits)
    if spec.k_el % step_elems:
        raise UnsupportedKernel(f"filter volume {spec.k_el} is not a multiple of {step_elems}")
    col_bytes = spec.k_el * buf_bits // 8
    w_row = spec.k_el * spec.wgt_bits // 8
    unpack_bits = spec.act_bits if (path == "sw" and spec.act_bits < 8) else None

    alloc = L1Allocator()
    from .golden import im2col_ref, pad_input
    xp = pad_input(x, spec.pad)
    in_base = alloc.alloc(xp.size * spec.act_bits // 8, align=16) if im2col else None
    w_base = alloc.alloc(spec.C_out * w_row, align=16)
    buf_n = (pb if im2col else ppc) * col_bytes
    bufs = alloc.per_core_alloc(buf_n, layout)
    out_n = ppc * spec.C_out * 4
    outs = alloc.per_core_alloc(out_n, layout)
    tab = alloc.alloc(8 * N_CORES, align=16)

    data = []
    if im2col:
        data += data_block(in_base, pack_elements(xp.reshape(-1), spec.act_bits))
    else:
        cols = im2col_ref(x, spec)
        for c in range(N_CORES):
            rows = cols[c * ppc:(c + 1) * ppc].reshape(-1)
            data += data_block(bufs[c], pack_elements(rows, buf_bits))
    data += data_block(w_base, pack_elements(np.asarray(w).reshape(-1), spec.wgt_bits))
    table = b"".join(bufs[c].to_bytes(4, "little") + outs[c].to_bytes(4, "little")
                     for c in range(N_CORES))
    data += data_block(tab, table)

    if path == "hw":
        fmt = fmt_word(a_bits, b_bits, spec.sign)
        macctl = 4 * pb
    else:
        fmt = fmt_word(a_bits, a_bits, spec.sign)
        macctl = 1
    op = DOTP_OP[spec.sign]

    e = _Emitter()
    e.lines += [".global _start", ".text", "_start:"]
    e(f"csrrs {R_ID}, mhartid, x0")
    e.li(R_TMP, fmt)
    e(f"csrrw x0, simd_fmt, {R_TMP}")
    e.li(R_TMP, macctl)
    e(f"csrrw x0, mp_macctl, {R_TMP}")
    e.li(R_TMP, tab)
    e(f"slli {R_X[0]}, {R_ID}, 3")
    e(f"add {R_TMP}, {R_TMP}, {R_X[0]}")
    e(f"lw {R_BUF}, 0({R_TMP})")
    e(f"lw {R_OUT}, 4({R_TMP})")
    e.li(R_TMP, ppc)
    e(f"mul {R_PIX}, {R_ID}, {R_TMP}")
    e.li(R_GRP, ppc // pb)
    lockstep = mode == "VLEM"
    if lockstep and not im2col:
        e("barrier")
        e("vlem.on")
    e.label(".Lgroup")
    if im2col:
        _im2col(e, spec, in_base, col_bytes, unpack_bits, spec.act_signed)
        if lockstep:
            e("barrier")
            e("vlem.on")
    _matmul_group(e, spec, path, w_base, w_row, col_bytes, a_bits, b_bits, acts_are_a, op,
                  step_elems)
    if im2col:
        if lockstep:
            e("vlem.off")
    else:
        e.add_const(R_BUF, R_BUF, pb * col_bytes)
    e(f"addi {R_PIX}, {R_PIX}, {pb}")
    e(f"addi {R_GRP}, {R_GRP}, -1")
    e(f"bnez {R_GRP}, .Lgroup")
    if lockstep and not im2col:
        e("vlem.off")
    e("barrier")

    source = "\n".join(e.lines + [""] + data) + "\n"
    out_addr = [outs[p // ppc] + (p % ppc) * spec.C_out * 4 for p in range(spec.pixels)]
    exp = np.asarray(expected).reshape(spec.pixels, spec.C_out)
    kname = name or f"{spec.name}_{mode}_{path}_{layout}"
    return KernelImage(kname, source, spec, mode, path, layout, exp, out_addr, spec.macs,
                       meta={"l1_bytes": alloc.used, "im2col": im2col, "fmt": fmt,
                             "macctl": macctl, "bufs": bufs, "outs": outs})


def gen_matmul(P, K_len, C_out, acts, weights, expected, *, act_bits=8, wgt_bits=8,
               sign=SignMode.SS, pixel_block=2, **kw) -> KernelImage:
    """acts (P, K_len) x weights (C_out, K_len), rows pre-distributed over the cores."""
    spec = ConvSpec(1, P, K_len, C_out, K=1, act_bits=act_bits, wgt_bits=wgt_bits,
                    sign=sign, pixel_block=pixel_block)
    x = np.asarray(acts).reshape(1, P, K_len)
    w = np.asarray(weights).reshape(C_out, 1, 1, K_len)
    kw.setdefault("name", f"matmul_{P}x{K_len}x{C_out}_a{act_bits}w{wgt_bits}"
                          f"_{kw.get('mode', 'VLEM')}_{kw.get('path', 'hw')}")
    return gen_conv(spec, x, w, expected, im2col=False, **kw)


@dataclass
class VecAddImage:
    source: str
    n: int
    chunk: int
    s: int
    a_base: int
    b_base: int
    c_base: int
    expected: list

    def check(self, cluster) -> tuple[bool, str]:
        for i, want in enumerate(self.expected):
            got = cluster.read(self.c_base + i * self.s, self.s)
            if got != want:
                return False, f"element {i}: got {got}, expected {want}"
        return True, "ok"


def gen_vecadd(n, chunk, s, *, mode="VLEM", seed=0) -> VecAddImage:
    """c[i] = a[i] + b[i] over ``n`` elements of ``s`` bytes, chunks dealt round-robin."""
    if s not in (1, 2, 4):
        raise UnsupportedKernel("element size must be 1, 2 or 4 bytes")
    if chunk < 1 or n % (N_CORES * chunk):
        raise UnsupportedKernel(f"n={n} must be a multiple of {N_CORES}*chunk")
    if (n * s) % 4:
        raise UnsupportedKernel("vector length must fill whole words")
    rng = np.random.default_rng(seed)
    mask = (1 << (8 * s)) - 1
    a = [int(v) for v in rng.integers(0, mask + 1, size=n, dtype=np.int64)]
    b = [int(v) for v in rng.integers(0, mask + 1, size=n, dtype=np.int64)]
    expected = [(x + y) & mask for x, y in zip(a, b)]
    alloc = L1Allocator()
    bases = [alloc.alloc(n * s, align=128) for _ in range(3)]
    ld, st = {1: ("lbu", "sb"), 2: ("lhu", "sh"), 4: ("lw", "sw")}[s]
    rounds = n // (N_CORES * chunk)
    e = _Emitter()
    e.lines += [".global _start", ".text", "_start:"]
    e(f"csrrs {R_ID}, mhartid, x0")
    e.li(R_X[0], chunk * s)
    e(f"mul {R_X[0]}, {R_ID}, {R_X[0]}")
    for reg, base in zip(R_AP + (R_X[1],), bases):
        e.li(reg, base)
        e(f"add {reg}, {reg}, {R_X[0]}")
    skip = (N_CORES - 1) * chunk * s
    if mode == "VLEM":
        e("barrier")
        e("vlem.on")
    e.li(R_TMP, rounds)
    round_end, el_end = e.fresh(".Lround"), e.fresh(".Lel")
    e(f"lp.setup 1, {R_TMP}, {round_end}")
    e.li(R_X[2], chunk)
    e(f"lp.setup 0, {R_X[2]}, {el_end}")
    e(f"{ld} {R_AW[0]}, 0({R_AP[0]})")
    e(f"{ld} {R_AW[1]}, 0({R_AP[1]})")
    e(f"add {R_AW[0]}, {R_AW[0]}, {R_AW[1]}")
    e(f"{st} {R_AW[0]}, 0({R_X[1]})")
    for reg in R_AP + (R_X[1],):
        e(f"addi {reg}, {reg}, {s}")
    e.label(el_end)
    for reg in R_AP + (R_X[1],):
        e.add_const(reg, reg, skip, tmp=R_X[3])
    e.label(round_end)
    if mode == "VLEM":
        e("vlem.off")
    e("barrier")
    data = []
    for base, vals in zip(bases[:2], (a, b)):
        payload = b"".join(v.to_bytes(s, "little") for v in vals)
        data += data_block(base, payload)
    source = "\n".join(e.lines + [""] + data) + "\n"
    return VecAddImage(source, n, chunk, s, *bases, expected)
