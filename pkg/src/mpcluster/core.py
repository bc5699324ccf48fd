"""Instruction-level model of one core: registers, CSRs, hardware loops,
post-increment addressing and the mixed-precision controller.

The core never touches memory itself. A memory instruction returns a
:class:`MemRequest` from :meth:`Core.issue`; the cluster arbitrates it and
calls :meth:`Core.complete` once the grant arrives.

Cycle costs: one cycle per instruction, one extra bubble for taken
branches and jumps, zero overhead for hardware-loop back-edges, memory
accesses one cycle plus whatever stall the interconnect adds.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from . import isa, simdmath
from .simdmath import MASK32, SignMode, SimdFormat

PREC_CODE = {16: 0, 8: 1, 4: 2, 2: 3}
CODE_PREC = {v: k for k, v in PREC_CODE.items()}

DOTP_SIGN = {
    "pv.dotp": SignMode.SS, "pv.sdotp": SignMode.SS,
    "pv.dotpu": SignMode.UU, "pv.sdotpu": SignMode.UU,
    "pv.dotpus": SignMode.US, "pv.sdotpus": SignMode.US,
}


@lru_cache(maxsize=None)
def _format(a, b, sign):
    return SimdFormat(a, b, sign)


class SimTrap(Exception):
    """Illegal instruction, bad CSR access, misaligned access, ..."""

    def __init__(self, message, core_id=None, pc=None, cycle=None):
        self.core_id, self.pc, self.cycle = core_id, pc, cycle
        where = []
        if core_id is not None:
            where.append(f"core {core_id}")
        if pc is not None:
            where.append(f"pc 0x{pc:08x}")
        if cycle is not None:
            where.append(f"cycle {cycle}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.message = message


def fmt_word(a: int, b: int, sign: SignMode = SignMode.SS) -> int:
    """SIMD_FMT register value for an (a, b, sign) format."""
    return PREC_CODE[a] | (PREC_CODE[b] << 2) | (int(sign) << 4)


def decode_fmt(value: int) -> SimdFormat:
    sign = (value >> 4) & 3
    if sign == 3:
        raise simdmath.SimdError("reserved sign mode")
    return SimdFormat(CODE_PREC[value & 3], CODE_PREC[(value >> 2) & 3], SignMode(sign))


@dataclass
class MemRequest:
    core_id: int
    addr: int
    is_store: bool
    width: int
    wdata: int = 0
    signed: bool = False
    rd: int = 0
    post_reg: int = 0      # register to post-increment, 0 for none
    post_value: int = 0    # value to write into post_reg on completion

    @property
    def word_addr(self):
        return self.addr & ~3


class Core:
    def __init__(self, core_id: int):
        self.core_id = core_id
        self.reset(0)

    def reset(self, pc: int):
        self.regs = [0] * 32
        self.pc = pc
        self.fmt_raw = fmt_word(8, 8)
        self.fmt = decode_fmt(self.fmt_raw)
        self.macctl = 1
        self.mac_counter = 0
        self.slice = 0
        self.loop_start = [0, 0]
        self.loop_end = [0, 0]
        self.loop_count = [0, 0]
        self.retired = 0
        self.macs = 0
        self.macctl_zero_warnings = 0
        self.dotp_by_prec = {16: 0, 8: 0, 4: 0, 2: 0}
        self.halted = False

    # registers

    def x(self, r):
        return self.regs[r]

    def set(self, r, v):
        if r:
            self.regs[r] = v & MASK32

    def trap(self, msg):
        raise SimTrap(msg, self.core_id, self.pc)

    # CSRs

    @property
    def mp_state(self):
        return (self.mac_counter & 0xFFFF) | ((self.slice & 0xF) << 16)

    def read_csr(self, addr: int) -> int:
        if addr == isa.CSR_SIMD_FMT:
            return self.fmt_raw
        if addr == isa.CSR_MP_MACCTL:
            return self.macctl
        if addr == isa.CSR_MP_STATE:
            return self.mp_state
        if addr == isa.CSR_MHARTID:
            return self.core_id
        self.trap(f"unimplemented CSR 0x{addr:03x}")

    def write_csr(self, addr: int, value: int):
        value &= MASK32
        if addr == isa.CSR_SIMD_FMT:
            try:
                fmt = decode_fmt(value & 0x3F)
            except simdmath.SimdError as e:
                self.trap(f"invalid SIMD_FMT 0x{value:x}: {e}")
            if (value & 0x3F) != self.fmt_raw:
                self.mac_counter = 0
                self.slice = 0
            self.fmt_raw = value & 0x3F
            self.fmt = fmt
        elif addr == isa.CSR_MP_MACCTL:
            self.macctl = value
        elif addr == isa.CSR_MP_STATE:
            self.mac_counter = value & 0xFFFF
            self.slice = min((value >> 16) & 0xF, self.fmt.slice_count - 1)
        elif addr == isa.CSR_MHARTID:
            self.trap("MHARTID is read-only")
        else:
            self.trap(f"unimplemented CSR 0x{addr:03x}")

    def mpc_advance(self):
        target = self.macctl
        if target == 0:
            target = 1
            self.macctl_zero_warnings += 1
        self.mac_counter += 1
        if self.mac_counter >= target:
            self.mac_counter = 0
            self.slice = (self.slice + 1) % self.fmt.slice_count

    def exec_virtual_simd(self, op: str, a_word: int, b_word: int, acc: int = 0) -> int:
        f = self.fmt
        fmt = _format(f.a, f.b, DOTP_SIGN[op])
        slc = self.slice if fmt.mixed else 0
        if op.startswith("pv.sdotp"):
            r = simdmath.sdotp(a_word, b_word, fmt, slc, simdmath.to_signed32(acc))
        else:
            r = simdmath.dotp(a_word, b_word, fmt, slc)
        self.macs += 32 // f.a
        self.dotp_by_prec[f.a] += 1
        if fmt.mixed:
            self.mpc_advance()
        return r & MASK32

    # control flow

    def next_sequential(self, pc):
        """Next pc after a non-jumping instruction at ``pc`` (hardware loops first)."""
        npc = pc + 4
        for lvl in (0, 1):
            if self.loop_count[lvl] and npc == self.loop_end[lvl]:
                if self.loop_count[lvl] > 1:
                    self.loop_count[lvl] -= 1
                    return self.loop_start[lvl]
                self.loop_count[lvl] = 0
        return npc

    def issue(self, ins):
        """Execute ``ins`` at the current pc.

        Returns the cycle cost (int), or a :class:`MemRequest` for memory
        instructions, whose register side effects wait for :meth:`complete`.
        """
        handler = _HANDLERS.get(ins.op)
        if handler is None:
            self.trap(f"illegal instruction '{ins.op}'")
        return handler(self, ins)

    def complete(self, req: MemRequest, value: int = 0):
        if not req.is_store and req.rd:
            if req.signed:
                value = simdmath.sext(value, 8 * req.width)
            self.regs[req.rd] = value & MASK32
        if req.post_reg:
            self.regs[req.post_reg] = req.post_value
        self.retired += 1


def _advance(core, cost=1):
    core.pc = core.next_sequential(core.pc)
    core.retired += 1
    return cost


def _alu(fn):
    def h(core, ins):
        r = core.regs
        if ins.rd:
            r[ins.rd] = fn(r[ins.rs1], r[ins.rs2]) & MASK32
        return _advance(core)
    return h


def _alui(fn):
    def h(core, ins):
        if ins.rd:
            core.regs[ins.rd] = fn(core.regs[ins.rs1], ins.imm & MASK32) & MASK32
        return _advance(core)
    return h


s32 = simdmath.to_signed32


def _div(a, b):
    a, b = s32(a), s32(b)
    if b == 0:
        return -1
    if a == -(1 << 31) and b == -1:
        return a
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _rem(a, b):
    a, b = s32(a), s32(b)
    if b == 0:
        return a
    if a == -(1 << 31) and b == -1:
        return 0
    return a - _div(a, b) * b


_HANDLERS = {}
_HANDLERS.update({
    "add": _alu(lambda a, b: a + b),
    "sub": _alu(lambda a, b: a - b),
    "and": _alu(lambda a, b: a & b),
    "or": _alu(lambda a, b: a | b),
    "xor": _alu(lambda a, b: a ^ b),
    "sll": _alu(lambda a, b: a << (b & 31)),
    "srl": _alu(lambda a, b: a >> (b & 31)),
    "sra": _alu(lambda a, b: s32(a) >> (b & 31)),
    "slt": _alu(lambda a, b: int(s32(a) < s32(b))),
    "sltu": _alu(lambda a, b: int(a < b)),
    "mul": _alu(lambda a, b: a * b),
    "mulh": _alu(lambda a, b: (s32(a) * s32(b)) >> 32),
    "div": _alu(_div),
    "rem": _alu(_rem),
    "addi": _alui(lambda a, i: a + i),
    "andi": _alui(lambda a, i: a & i),
    "ori": _alui(lambda a, i: a | i),
    "xori": _alui(lambda a, i: a ^ i),
    "slti": _alui(lambda a, i: int(s32(a) < s32(i))),
    "slli": _alui(lambda a, i: a << i),
    "srli": _alui(lambda a, i: a >> i),
    "srai": _alui(lambda a, i: s32(a) >> i),
    "pv.packlo.b": None,
    "pv.packhi.b": None,
})


def _lui(core, ins):
    core.set(ins.rd, ins.imm << 12)
    return _advance(core)


def _auipc(core, ins):
    core.set(ins.rd, core.pc + (ins.imm << 12))
    return _advance(core)


def _pack(hi):
    def h(core, ins):
        r = core.regs
        if ins.rd:
            r[ins.rd] = simdmath.pack_byte(r[ins.rd], r[ins.rs1], r[ins.rs2], hi)
        return _advance(core)
    return h


def _extract(signed):
    def h(core, ins):
        if ins.rd:
            core.regs[ins.rd] = simdmath.extract(core.regs[ins.rs1], ins.imm, ins.aux, signed)
        return _advance(core)
    return h


def _dotp(core, ins):
    r = core.regs
    res = core.exec_virtual_simd(ins.op, r[ins.rs1], r[ins.rs2], r[ins.rd])
    if ins.rd:
        r[ins.rd] = res
    return _advance(core)


_BRANCH = {
    "beq": lambda a, b: a == b,
    "bne": lambda a, b: a != b,
    "blt": lambda a, b: s32(a) < s32(b),
    "bge": lambda a, b: s32(a) >= s32(b),
    "bltu": lambda a, b: a < b,
    "bgeu": lambda a, b: a >= b,
}


def _branch(cond):
    def h(core, ins):
        core.retired += 1
        if cond(core.regs[ins.rs1], core.regs[ins.rs2]):
            core.pc = ins.imm
            return 2
        core.pc = core.next_sequential(core.pc)
        return 1
    return h


def _jal(core, ins):
    core.set(ins.rd, core.pc + 4)
    core.pc = ins.imm
    core.retired += 1
    return 2


def _jalr(core, ins):
    t = (core.regs[ins.rs1] + ins.imm) & ~1 & MASK32
    core.set(ins.rd, core.pc + 4)
    core.pc = t
    core.retired += 1
    return 2


def _csr(kind):
    def h(core, ins):
        old = core.read_csr(ins.imm)
        if kind == "rwi":
            core.write_csr(ins.imm, ins.aux)
        else:
            src = core.regs[ins.rs1]
            if kind == "rw":
                core.write_csr(ins.imm, src)
            elif ins.rs1:
                core.write_csr(ins.imm, old | src if kind == "rs" else old & ~src)
        core.set(ins.rd, old)
        return _advance(core)
    return h


def _lp_setup(core, ins):
    lvl = ins.aux
    core.loop_start[lvl] = core.pc + 4
    core.loop_end[lvl] = ins.imm
    core.loop_count[lvl] = core.regs[ins.rs1]
    if ins.imm <= core.pc + 4:
        core.trap("hardware loop end must follow its start")
    return _advance(core)


def _lp_count(core, ins):
    core.loop_count[ins.aux] = core.regs[ins.rs1]
    return _advance(core)


def _lp_start(core, ins):
    core.loop_start[ins.aux] = ins.imm
    return _advance(core)


def _lp_end(core, ins):
    core.loop_end[ins.aux] = ins.imm
    return _advance(core)


_LOAD = {"lw": (4, False), "lh": (2, True), "lhu": (2, False), "lb": (1, True),
         "lbu": (1, False), "p.lw": (4, False)}
_STORE = {"sw": 4, "sh": 2, "sb": 1, "p.sw": 4}


def _load(core, ins):
    width, signed = _LOAD[ins.op]
    base = core.regs[ins.rs1]
    if ins.op == "p.lw":
        addr, post_reg, post_value = base, ins.rs1, (base + ins.imm) & MASK32
    else:
        addr, post_reg, post_value = (base + ins.imm) & MASK32, 0, 0
    if addr % width:
        core.trap(f"misaligned {width}-byte load at 0x{addr:08x}")
    req = MemRequest(core.core_id, addr, False, width, 0, signed, ins.rd, post_reg, post_value)
    core.pc = core.next_sequential(core.pc)
    return req


def _store(core, ins):
    width = _STORE[ins.op]
    base = core.regs[ins.rs1]
    if ins.op == "p.sw":
        addr, post_reg, post_value = base, ins.rs1, (base + ins.imm) & MASK32
    else:
        addr, post_reg, post_value = (base + ins.imm) & MASK32, 0, 0
    if addr % width:
        core.trap(f"misaligned {width}-byte store at 0x{addr:08x}")
    wdata = core.regs[ins.rs2] & ((1 << (8 * width)) - 1)
    req = MemRequest(core.core_id, addr, True, width, wdata, False, 0, post_reg, post_value)
    core.pc = core.next_sequential(core.pc)
    return req


def _barrier(core, ins):
    core.pc = core.next_sequential(core.pc)
    return MemRequest(core.core_id, isa.EU_BARRIER, False, 4)


def _vlem(value):
    def h(core, ins):
        core.pc = core.next_sequential(core.pc)
        return MemRequest(core.core_id, isa.VLEM_CTRL, True, 4, value)
    return h


_HANDLERS.update({
    "lui": _lui, "auipc": _auipc,
    "pv.packlo.b": _pack(False), "pv.packhi.b": _pack(True),
    "p.extract": _extract(True), "p.extractu": _extract(False),
    "jal": _jal, "jalr": _jalr,
    "csrrw": _csr("rw"), "csrrs": _csr("rs"), "csrrc": _csr("rc"), "csrrwi": _csr("rwi"),
    "lp.setup": _lp_setup, "lp.count": _lp_count, "lp.start": _lp_start, "lp.end": _lp_end,
    "barrier": _barrier, "vlem.on": _vlem(1), "vlem.off": _vlem(0),
})
_HANDLERS.update({op: _branch(c) for op, c in _BRANCH.items()})
_HANDLERS.update({op: _dotp for op in isa.DOTP_MNEMONICS})
_HANDLERS.update({op: _load for op in _LOAD})
_HANDLERS.update({op: _store for op in _STORE})
assert set(_HANDLERS) == set(isa.MNEMONICS), set(isa.MNEMONICS) ^ set(_HANDLERS)
