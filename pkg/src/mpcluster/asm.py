"""Two-pass assembler, disassembler and program image for the cluster ISA.

Pass 1 splits the source into sections, records labels as
(section, offset) pairs and sizes every statement; sections are then laid
out in their regions. Pass 2 evaluates operands against the final symbol
table and builds decoded :class:`Instruction` objects. Errors are collected
rather than raised one at a time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import isa
from .isa import Instruction, SHAPES, REGISTERS, CSR_NAMES


class AsmError(Exception):
    KINDS = ("syntax", "unknown-mnemonic", "bad-operand", "duplicate-label",
             "undefined-label", "section-overflow")

    def __init__(self, kind, span, message):
        assert kind in self.KINDS
        super().__init__(message)
        self.kind = kind
        self.span = span  # (file, line, column)
        self.message = message

    def __str__(self):
        f, line, col = self.span
        return f"{f}:{line}:{col}: {self.kind}: {self.message}"


class AssemblyFailed(Exception):
    def __init__(self, errors):
        self.errors = sorted(errors, key=lambda e: e.span[1:])
        super().__init__("\n".join(str(e) for e in self.errors))


@dataclass
class DataSection:
    region: str  # "L1" or "L2"
    base: int
    payload: bytearray = field(default_factory=bytearray)

    @property
    def end(self):
        return self.base + len(self.payload)


@dataclass
class Program:
    text: list
    text_base: int = isa.L2_BASE
    data_sections: list = field(default_factory=list)
    symbols: dict = field(default_factory=dict)
    entry: int | None = None

    def __post_init__(self):
        if self.entry is None and self.text:
            self.entry = self.text_base

    @property
    def text_end(self):
        return self.text_base + 4 * len(self.text)

    def instruction_at(self, addr):
        return self.text[(addr - self.text_base) >> 2]


REGIONS = {
    "L1": (isa.TCDM_BASE, isa.TCDM_BYTES),
    "L2": (isa.L2_BASE, isa.L2_BYTES),
}

_LABEL = re.compile(r"\s*([A-Za-z_.$][\w.$]*)\s*:")
_SYMBOL = re.compile(r"[A-Za-z_.$][\w.$]*$")
_MEM = re.compile(r"^(.*)\(\s*([\w$]+)\s*(!?)\s*\)$")
_RELOC = re.compile(r"^%(hi|lo)\((.*)\)$")


def _strip_comment(line):
    for marker in ("#", "//", ";"):
        i = line.find(marker)
        if i >= 0:
            line = line[:i]
    return line


def _split_operands(text):
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def parse_int(tok):
    tok = tok.strip().replace("_", "")
    neg = tok.startswith("-")
    body = tok[1:] if neg or tok.startswith("+") else tok
    if body.lower().startswith("0x"):
        v = int(body, 16)
    elif body.lower().startswith("0b"):
        v = int(body, 2)
    elif body.isdigit():
        v = int(body, 10)
    else:
        raise ValueError(tok)
    return -v if neg else v


def _fits(v, bits, signed=True):
    if signed:
        return -(1 << (bits - 1)) <= v < (1 << (bits - 1))
    return 0 <= v < (1 << bits)


def hi20(v):
    return ((v + 0x800) >> 12) & 0xFFFFF


def lo12(v):
    lo = v & 0xFFF
    return lo - 0x1000 if lo & 0x800 else lo


@dataclass
class _Stmt:
    kind: str  # "insn" or "data"
    mnemonic: str
    operands: list
    span: tuple
    section: int
    offset: int
    size: int


class _Section:
    def __init__(self, kind, region, base=None, span=None):
        self.kind = kind
        self.region = region
        self.base = base
        self.size = 0
        self.align = 16
        self.span = span


class Assembler:
    def __init__(self, filename="<input>", l2_bytes=isa.L2_BYTES):
        self.filename = filename
        self.regions = dict(REGIONS)
        self.regions["L2"] = (isa.L2_BASE, l2_bytes)
        self.errors = []

    def err(self, kind, line, col, msg):
        self.errors.append(AsmError(kind, (self.filename, line, col), msg))

    # pass 1

    def _pass1(self, source):
        self.sections = [_Section("text", "L2", span=(self.filename, 1, 1))]
        self.cur = 0
        self.labels = {}
        self.stmts = []
        self.entry_name = None
        for lineno, raw in enumerate(source.splitlines(), 1):
            line = _strip_comment(raw)
            col0 = 0
            while True:
                m = _LABEL.match(line)
                if not m:
                    break
                name = m.group(1)
                col = col0 + m.start(1) + 1
                if name in self.labels:
                    self.err("duplicate-label", lineno, col, f"label '{name}' already defined")
                else:
                    sec = self.sections[self.cur]
                    self.labels[name] = (self.cur, sec.size)
                col0 += m.end()
                line = line[m.end():]
            if not line.strip():
                continue
            col = col0 + len(line) - len(line.lstrip()) + 1
            body = line.strip()
            parts = body.split(None, 1)
            head = parts[0].lower()
            rest = parts[1] if len(parts) > 1 else ""
            ops = _split_operands(rest.replace("\t", " ")) if rest.strip() else []
            span = (self.filename, lineno, col)
            if head.startswith("."):
                self._directive(head, rest.split() if head in (".text", ".data", ".l1", ".l2") else ops, span)
            else:
                self._instruction(head, ops, span)

    def _directive(self, d, args, span):
        _, line, col = span
        if d in (".text", ".data", ".l1", ".l2"):
            if d == ".text":
                kind, region = "text", "L2"
            else:
                kind, region = "data", "L1" if d != ".l2" else "L2"
            base = None
            for a in args:
                a = a.lower()
                if a in (".l1", ".l2"):
                    region = a[1:].upper()
                else:
                    try:
                        base = parse_int(a)
                    except ValueError:
                        self.err("syntax", line, col, f"bad section argument '{a}'")
            if kind == "text":
                if base is not None:
                    if self.sections[0].size and self.sections[0].base != base:
                        self.err("syntax", line, col, "text base changed after code was emitted")
                    self.sections[0].base = base
                self.cur = 0
                return
            if base is None:
                for i, s in enumerate(self.sections):
                    if s.kind == "data" and s.region == region and s.base is None:
                        self.cur = i
                        return
            self.sections.append(_Section("data", region, base, span))
            self.cur = len(self.sections) - 1
            return
        sec = self.sections[self.cur]
        if d == ".global" or d == ".globl":
            if args:
                self.entry_name = self.entry_name or args[0]
            return
        if d in (".word", ".byte", ".half"):
            if sec.kind == "text":
                self.err("syntax", line, col, f"{d} not allowed in .text")
                return
            if not args:
                self.err("syntax", line, col, f"{d} needs at least one value")
                return
            width = {".word": 4, ".half": 2, ".byte": 1}[d]
            if width == 4 and sec.size % 4:
                self.err("bad-operand", line, col, ".word must be 4-byte aligned")
            self._emit("data", d, args, span, width * len(args))
            return
        if d == ".space":
            try:
                n = parse_int(args[0]) if args else -1
            except ValueError:
                n = -1
            if n < 0:
                self.err("bad-operand", line, col, ".space needs a non-negative size")
                return
            if sec.kind == "text":
                if n % 4:
                    self.err("bad-operand", line, col, ".space in .text must be a multiple of 4")
                    return
                for _ in range(n // 4):
                    self._emit("insn", "addi", ["x0", "x0", "0"], span, 4)
                return
            self._emit("data", d, [str(n)], span, n)
            return
        if d == ".align":
            try:
                p = parse_int(args[0]) if args else -1
            except ValueError:
                p = -1
            if not 0 <= p <= 16:
                self.err("bad-operand", line, col, ".align needs a power-of-two exponent 0..16")
                return
            a = 1 << p
            pad = (-sec.size) % a
            if sec.kind == "text":
                if pad % 4:
                    self.err("bad-operand", line, col, "text alignment below 4 bytes")
                for _ in range(pad // 4):
                    self._emit("insn", "addi", ["x0", "x0", "0"], span, 4)
            elif pad:
                self._emit("data", ".space", [str(pad)], span, pad)
            if sec.kind == "data" and sec.base is None:
                sec.align = max(sec.align, a)
            return
        self.err("syntax", line, col, f"unknown directive '{d}'")

    def _emit(self, kind, mnemonic, ops, span, size):
        sec = self.sections[self.cur]
        self.stmts.append(_Stmt(kind, mnemonic, ops, span, self.cur, sec.size, size))
        sec.size += size

    def _instruction(self, m, ops, span):
        _, line, col = span
        if self.sections[self.cur].kind != "text":
            self.err("syntax", line, col, "instruction outside .text")
            return
        if m == "li":
            n = 1
            if len(ops) == 2:
                try:
                    n = 1 if _fits(parse_int(ops[1]), 12) else 2
                except ValueError:
                    n = 2
            self._emit("insn", m, ops, span, 4 * n)
        elif m == "la":
            self._emit("insn", m, ops, span, 8)
        elif m in SHAPES or m in ("j", "mv", "nop", "ret", "jr", "bnez", "beqz"):
            self._emit("insn", m, ops, span, 4)
        else:
            self.err("unknown-mnemonic", line, col, f"unknown mnemonic '{m}'")

    # layout

    def _layout(self):
        text = self.sections[0]
        if text.base is None:
            text.base = isa.L2_BASE
        cursor = {"L1": self.regions["L1"][0], "L2": text.base + text.size}
        for s in self.sections:
            if s.kind == "data" and s.base is None:
                c = cursor[s.region]
                c = (c + s.align - 1) // s.align * s.align
                s.base = c
            if s.kind == "data":
                cursor[s.region] = max(cursor[s.region], s.base + s.size)
        for s in self.sections:
            if s.kind == "data" and s.base % 4:
                self.err("bad-operand", s.span[1], s.span[2], f"section base 0x{s.base:x} not 4-byte aligned")
        # bounds and overlap
        spans = []
        for i, s in enumerate(self.sections):
            if s.kind == "text" and s.size == 0:
                continue
            lo, size = self.regions[s.region]
            if not (lo <= s.base and s.base + s.size <= lo + size):
                self.err("section-overflow", s.span[1], s.span[2],
                         f"{s.kind} section at 0x{s.base:x} (+{s.size}) exceeds {s.region}")
            spans.append((s.base, s.base + s.size, i))
        spans.sort()
        for (a0, a1, i), (b0, b1, j) in zip(spans, spans[1:]):
            if b0 < a1:
                sp = self.sections[j].span
                self.err("section-overflow", sp[1], sp[2], f"sections overlap at 0x{b0:x}")
        self.symbols = {name: self.sections[si].base + off for name, (si, off) in self.labels.items()}

    # pass 2

    def _value(self, tok, span, allow_symbols=True):
        tok = tok.strip()
        m = _RELOC.match(tok)
        if m:
            v = self._value(m.group(2), span)
            if v is None:
                return None
            return hi20(v) if m.group(1) == "hi" else lo12(v)
        try:
            return parse_int(tok)
        except ValueError:
            pass
        if not allow_symbols:
            raise ValueError(tok)
        mm = re.match(r"^([A-Za-z_.$][\w.$]*)\s*([+-]\s*\w+)?$", tok)
        if not mm:
            raise ValueError(tok)
        name = mm.group(1)
        if name not in self.symbols:
            _, line, col = span
            self.err("undefined-label", line, col, f"undefined label '{name}'")
            return None
        off = parse_int(mm.group(2).replace(" ", "")) if mm.group(2) else 0
        return self.symbols[name] + off

    def _reg(self, tok, span):
        r = REGISTERS.get(tok.strip().lower())
        if r is None:
            raise ValueError(f"bad register '{tok}'")
        return r

    def _pass2(self):
        self.text = []
        payloads = {i: bytearray() for i, s in enumerate(self.sections) if s.kind == "data"}
        for st in self.stmts:
            _, line, col = st.span
            if st.kind == "data":
                buf = payloads[st.section]
                if st.mnemonic == ".space":
                    buf.extend(bytes(int(st.operands[0])))
                    continue
                width = {".word": 4, ".half": 2, ".byte": 1}[st.mnemonic]
                for a in st.operands:
                    try:
                        v = self._value(a, st.span)
                    except ValueError:
                        self.err("bad-operand", line, col, f"bad value '{a}'")
                        v = 0
                    if v is None:
                        v = 0
                    if not -(1 << (8 * width - 1)) <= v < (1 << (8 * width)):
                        self.err("bad-operand", line, col, f"value {a} does not fit in {width} bytes")
                    buf.extend((v & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))
                continue
            pc = self.sections[0].base + st.offset
            try:
                insns = self._encode(st.mnemonic, st.operands, pc, st.span)
            except ValueError as e:
                self.err("bad-operand", line, col, str(e))
                insns = [Instruction("addi", span=st.span)] * (st.size // 4)
            assert len(insns) * 4 == st.size, (st.mnemonic, st.size)
            self.text.extend(insns)
        self.payloads = payloads

    def _encode(self, m, ops, pc, span):
        def need(n):
            if len(ops) != n:
                raise ValueError(f"'{m}' expects {n} operands, got {len(ops)}")

        def imm(tok, bits, signed=True):
            v = self._value(tok, span)
            if v is None:
                return 0
            if not _fits(v, bits, signed):
                raise ValueError(f"immediate {tok} out of range for {bits}-bit field")
            return v

        def target(tok):
            v = self._value(tok, span)
            return 0 if v is None else v

        def mem(tok, post):
            mm = _MEM.match(tok.strip())
            if not mm:
                raise ValueError(f"expected 'imm(reg)' operand, got '{tok}'")
            if bool(mm.group(3)) != post:
                raise ValueError("post-increment '!' only with p.lw/p.sw" if not post
                                 else f"'{m}' needs the post-increment form imm(rs!)")
            off = mm.group(1).strip() or "0"
            return imm(off, 12), self._reg(mm.group(2), span)

        reg = lambda t: self._reg(t, span)  # noqa: E731
        I = lambda op, **kw: Instruction(op, span=span, **kw)  # noqa: E731

        # pseudo instructions
        if m == "nop":
            need(0)
            return [I("addi")]
        if m == "mv":
            need(2)
            return [I("addi", rd=reg(ops[0]), rs1=reg(ops[1]))]
        if m == "j":
            need(1)
            return [I("jal", rd=0, imm=target(ops[0]))]
        if m == "jr":
            need(1)
            return [I("jalr", rd=0, rs1=reg(ops[0]))]
        if m == "ret":
            need(0)
            return [I("jalr", rd=0, rs1=1)]
        if m in ("bnez", "beqz"):
            need(2)
            return [I("bne" if m == "bnez" else "beq", rs1=reg(ops[0]), rs2=0, imm=target(ops[1]))]
        if m in ("li", "la"):
            need(2)
            rd = reg(ops[0])
            v = self._value(ops[1], span)
            v = 0 if v is None else v
            if not -(1 << 31) <= v < (1 << 32):
                raise ValueError(f"value {ops[1]} does not fit in 32 bits")
            v &= 0xFFFFFFFF
            sv = v - (1 << 32) if v & 0x80000000 else v
            if m == "li" and _fits(sv, 12) and self._li_short(ops[1]):
                return [I("addi", rd=rd, rs1=0, imm=sv)]
            return [I("lui", rd=rd, imm=hi20(v)), I("addi", rd=rd, rs1=rd, imm=lo12(v))]

        shape = SHAPES[m]
        if shape == "N":
            need(0)
            return [I(m)]
        if shape == "R":
            need(3)
            return [I(m, rd=reg(ops[0]), rs1=reg(ops[1]), rs2=reg(ops[2]))]
        if shape == "I":
            need(3)
            return [I(m, rd=reg(ops[0]), rs1=reg(ops[1]), imm=imm(ops[2], 12))]
        if shape == "SH":
            need(3)
            return [I(m, rd=reg(ops[0]), rs1=reg(ops[1]), imm=imm(ops[2], 5, False))]
        if shape == "U":
            need(2)
            return [I(m, rd=reg(ops[0]), imm=imm(ops[1], 20, False))]
        if shape in ("L", "PL"):
            need(2)
            off, base = mem(ops[1], shape == "PL")
            return [I(m, rd=reg(ops[0]), rs1=base, imm=off)]
        if shape in ("S", "PS"):
            need(2)
            off, base = mem(ops[1], shape == "PS")
            return [I(m, rs2=reg(ops[0]), rs1=base, imm=off)]
        if shape == "B":
            need(3)
            return [I(m, rs1=reg(ops[0]), rs2=reg(ops[1]), imm=target(ops[2]))]
        if shape == "J":
            if len(ops) == 1:
                return [I(m, rd=1, imm=target(ops[0]))]
            need(2)
            return [I(m, rd=reg(ops[0]), imm=target(ops[1]))]
        if shape == "JR":
            if len(ops) == 2 and "(" in ops[1]:
                off, base = mem(ops[1], False)
                return [I(m, rd=reg(ops[0]), rs1=base, imm=off)]
            need(3)
            return [I(m, rd=reg(ops[0]), rs1=reg(ops[1]), imm=imm(ops[2], 12))]
        if shape in ("C", "CI"):
            need(3)
            csr = CSR_NAMES.get(ops[1].strip().lower())
            if csr is None:
                csr = imm(ops[1], 12, False)
            if shape == "C":
                return [I(m, rd=reg(ops[0]), rs1=reg(ops[2]), imm=csr)]
            return [I(m, rd=reg(ops[0]), imm=csr, aux=imm(ops[2], 5, False))]
        if shape in ("LPS", "LPC", "LPA"):
            need({"LPS": 3, "LPC": 2, "LPA": 2}[shape])
            level = imm(ops[0], 1, False)
            if shape == "LPS":
                return [I(m, rs1=reg(ops[1]), imm=target(ops[2]), aux=level)]
            if shape == "LPC":
                return [I(m, rs1=reg(ops[1]), aux=level)]
            return [I(m, imm=target(ops[1]), aux=level)]
        if shape == "X":
            need(4)
            width = imm(ops[2], 6, False)
            if width not in (2, 4, 8, 16):
                raise ValueError(f"extract width must be 2, 4, 8 or 16, got {width}")
            idx = imm(ops[3], 5, False)
            if idx >= 32 // width:
                raise ValueError(f"lane {idx} out of range for {width}-bit lanes")
            return [I(m, rd=reg(ops[0]), rs1=reg(ops[1]), imm=width, aux=idx)]
        raise AssertionError(shape)

    def _li_short(self, tok):
        try:
            return _fits(parse_int(tok), 12)
        except ValueError:
            return False

    def run(self, source):
        self._pass1(source)
        self._layout()
        self._pass2()
        if self.errors:
            raise AssemblyFailed(self.errors)
        entry = None
        if self.entry_name and self.entry_name in self.symbols:
            entry = self.symbols[self.entry_name]
        elif "_start" in self.symbols:
            entry = self.symbols["_start"]
        text_base = self.sections[0].base
        data = [DataSection(s.region, s.base, self.payloads[i])
                for i, s in enumerate(self.sections) if s.kind == "data" and s.size]
        data.sort(key=lambda d: d.base)
        prog = Program(self.text, text_base, data, dict(self.symbols), entry)
        if prog.entry is not None and not (text_base <= prog.entry < prog.text_end):
            raise AssemblyFailed([AsmError("undefined-label", (self.filename, 1, 1),
                                           "entry point is outside .text")])
        return prog


def assemble(source: str, filename: str = "<input>", l2_bytes: int = isa.L2_BYTES) -> Program:
    """Assemble ``source``; raises :class:`AssemblyFailed` with every error found."""
    return Assembler(filename, l2_bytes).run(source)


# disassembly

_INV_CSR = {v: k for k, v in CSR_NAMES.items()}


def _fmt_insn(ins: Instruction, label_of) -> str:
    x = lambda r: f"x{r}"  # noqa: E731
    m, shape = ins.op, ins.shape
    if shape == "N":
        return m
    if shape == "R":
        return f"{m} {x(ins.rd)}, {x(ins.rs1)}, {x(ins.rs2)}"
    if shape in ("I", "SH"):
        return f"{m} {x(ins.rd)}, {x(ins.rs1)}, {ins.imm}"
    if shape == "U":
        return f"{m} {x(ins.rd)}, 0x{ins.imm:x}"
    if shape == "L":
        return f"{m} {x(ins.rd)}, {ins.imm}({x(ins.rs1)})"
    if shape == "PL":
        return f"{m} {x(ins.rd)}, {ins.imm}({x(ins.rs1)}!)"
    if shape == "S":
        return f"{m} {x(ins.rs2)}, {ins.imm}({x(ins.rs1)})"
    if shape == "PS":
        return f"{m} {x(ins.rs2)}, {ins.imm}({x(ins.rs1)}!)"
    if shape == "B":
        return f"{m} {x(ins.rs1)}, {x(ins.rs2)}, {label_of(ins.imm)}"
    if shape == "J":
        return f"{m} {x(ins.rd)}, {label_of(ins.imm)}"
    if shape == "JR":
        return f"{m} {x(ins.rd)}, {ins.imm}({x(ins.rs1)})"
    if shape == "C":
        return f"{m} {x(ins.rd)}, {_INV_CSR.get(ins.imm, hex(ins.imm))}, {x(ins.rs1)}"
    if shape == "CI":
        return f"{m} {x(ins.rd)}, {_INV_CSR.get(ins.imm, hex(ins.imm))}, {ins.aux}"
    if shape == "LPS":
        return f"{m} {ins.aux}, {x(ins.rs1)}, {label_of(ins.imm)}"
    if shape == "LPC":
        return f"{m} {ins.aux}, {x(ins.rs1)}"
    if shape == "LPA":
        return f"{m} {ins.aux}, {label_of(ins.imm)}"
    if shape == "X":
        return f"{m} {x(ins.rd)}, {x(ins.rs1)}, {ins.imm}, {ins.aux}"
    raise AssertionError(shape)


def format_instruction(ins: Instruction, label_of=None) -> str:
    """One instruction as assembly text; branch targets go through ``label_of``."""
    return _fmt_insn(ins, label_of or (lambda a: f"0x{a:x}"))


def disassemble(program: Program) -> str:
    """Render ``program`` as source that reassembles to the same image."""
    by_addr = {}
    for name, addr in sorted(program.symbols.items()):
        by_addr.setdefault(addr, []).append(name)
    text_lo, text_hi = program.text_base, program.text_end
    synth = {}
    for ins in program.text:
        if ins.shape in ("B", "J", "LPS", "LPA"):
            a = ins.imm
            if a not in by_addr and text_lo <= a <= text_hi:
                synth[a] = f".L{a:08x}"

    def label_of(a):
        if a in by_addr:
            return by_addr[a][0]
        if a in synth:
            return synth[a]
        return f"0x{a:x}"

    out = []
    entry_name = None
    if program.entry is not None:
        names = by_addr.get(program.entry)
        if names:
            entry_name = names[0]
        else:
            entry_name = synth.setdefault(program.entry, f".L{program.entry:08x}")
    if entry_name:
        out.append(f".global {entry_name}")
    out.append(f".text 0x{program.text_base:x}")
    for i, ins in enumerate(program.text):
        a = program.text_base + 4 * i
        for name in by_addr.get(a, []):
            out.append(f"{name}:")
        if a in synth:
            out.append(f"{synth[a]}:")
        out.append("    " + _fmt_insn(ins, label_of))
    for name in by_addr.get(text_hi, []):
        if not any(s.base <= text_hi < s.end for s in program.data_sections):
            out.append(f"{name}:")
    if text_hi in synth:
        out.append(f"{synth[text_hi]}:")
    for sec in program.data_sections:
        out.append(f".data .{sec.region.lower()} 0x{sec.base:x}")
        p = bytes(sec.payload)
        i = 0
        while i < len(p):
            a = sec.base + i
            for name in by_addr.get(a, []):
                out.append(f"{name}:")
            if i + 4 <= len(p) and a % 4 == 0:
                out.append(f"    .word 0x{int.from_bytes(p[i:i + 4], 'little'):08x}")
                i += 4
            else:
                out.append(f"    .byte 0x{p[i]:02x}")
                i += 1
    return "\n".join(out) + "\n"
