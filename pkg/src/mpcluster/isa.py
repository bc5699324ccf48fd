"""Mnemonic table, operand shapes, register names and the stable memory/CSR map."""

from __future__ import annotations

from dataclasses import dataclass, field

# memory map
TCDM_BASE = 0x10000000
TCDM_BYTES = 128 * 1024
PERIPH_BASE = 0x10200000
EU_BARRIER = PERIPH_BASE + 0x000
VLEM_CTRL = PERIPH_BASE + 0x100
CYCLE_COUNTER = PERIPH_BASE + 0x200
L2_BASE = 0x1C000000
L2_BYTES = 512 * 1024

# CSR addresses
CSR_SIMD_FMT = 0x7C0
CSR_MP_MACCTL = 0x7C1
CSR_MP_STATE = 0x7C2
CSR_MHARTID = 0xF14
CSR_NAMES = {
    "simd_fmt": CSR_SIMD_FMT,
    "mp_macctl": CSR_MP_MACCTL,
    "mp_state": CSR_MP_STATE,
    "mhartid": CSR_MHARTID,
}

ABI_NAMES = (
    "zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
    "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6"
).split()
REGISTERS = {f"x{i}": i for i in range(32)}
REGISTERS.update({name: i for i, name in enumerate(ABI_NAMES)})
REGISTERS["fp"] = 8

# Operand shapes:
#   R    rd, rs1, rs2           I    rd, rs1, imm          SH   rd, rs1, shamt
#   U    rd, imm                L    rd, imm(rs1)          S    rs2, imm(rs1)
#   PL   rd, imm(rs1!)          PS   rs2, imm(rs1!)        B    rs1, rs2, target
#   J    rd, target             JR   rd, imm(rs1)          C    rd, csr, rs1
#   CI   rd, csr, uimm          LPS  level, rs1, target    LPC  level, rs1
#   LPA  level, target          X    rd, rs1, width, lane  N    (no operands)
SHAPES: dict[str, str] = {}
for _m in "add sub and or xor sll srl sra slt sltu mul mulh div rem".split():
    SHAPES[_m] = "R"
for _m in "addi andi ori xori slti".split():
    SHAPES[_m] = "I"
for _m in "slli srli srai".split():
    SHAPES[_m] = "SH"
SHAPES.update(lui="U", auipc="U")
for _m in "lw lh lhu lb lbu".split():
    SHAPES[_m] = "L"
for _m in "sw sh sb".split():
    SHAPES[_m] = "S"
for _m in "beq bne blt bge bltu bgeu".split():
    SHAPES[_m] = "B"
SHAPES.update(jal="J", jalr="JR")
SHAPES.update(csrrw="C", csrrs="C", csrrc="C", csrrwi="CI")
SHAPES.update({"lp.setup": "LPS", "lp.count": "LPC", "lp.start": "LPA", "lp.end": "LPA"})
SHAPES.update({"p.lw": "PL", "p.sw": "PS"})
SHAPES.update({"p.extract": "X", "p.extractu": "X"})
SHAPES.update({"pv.packlo.b": "R", "pv.packhi.b": "R"})

# The virtual SIMD family: precision comes from SIMD_FMT, not the mnemonic.
# The mnemonic suffix selects the sign mode.
DOTP_MNEMONICS = ("pv.dotp", "pv.dotpu", "pv.dotpus", "pv.sdotp", "pv.sdotpu", "pv.sdotpus")
for _m in DOTP_MNEMONICS:
    SHAPES[_m] = "R"

# Memory-mapped pseudo operations kept as their own decoded entries.
SHAPES.update({"barrier": "N", "vlem.on": "N", "vlem.off": "N"})

MNEMONICS = frozenset(SHAPES)
BRANCHES = frozenset("beq bne blt bge bltu bgeu".split())
LOADS = frozenset("lw lh lhu lb lbu p.lw".split())
STORES = frozenset("sw sh sb p.sw".split())


def is_simd_virtual(op: str) -> bool:
    return op in DOTP_MNEMONICS


@dataclass
class Instruction:
    """One decoded instruction.

    ``imm`` holds the immediate, or the resolved absolute address for
    branch/jump/loop targets. ``aux`` holds a second immediate
    (lane index for p.extract, loop level for lp.*).
    """

    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    aux: int = 0
    span: tuple | None = field(default=None, compare=False, repr=False)

    @property
    def is_simd_virtual(self) -> bool:
        return self.op in DOTP_MNEMONICS

    @property
    def shape(self) -> str:
        return SHAPES[self.op]
