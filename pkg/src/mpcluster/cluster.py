"""The 16-core cluster: banked TCDM, round-robin interconnect, lockstep unit,
event unit and a two-level instruction cache, advanced cycle by cycle.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import isa
from .asm import Program
from .core import Core, MemRequest, SimTrap


class DivergenceError(SimTrap):
    pass


class DeadlockError(SimTrap):
    pass


class SimTimeout(SimTrap):
    def __init__(self, message, metrics=None, cycle=None):
        super().__init__(message, cycle=cycle)
        self.metrics = metrics


class LoadError(Exception):
    pass


@dataclass
class ClusterConfig:
    n_cores: int = 16
    n_banks: int = 32
    word_size: int = 4
    tcdm_bytes: int = isa.TCDM_BYTES
    tcdm_base: int = isa.TCDM_BASE
    l2_base: int = isa.L2_BASE
    l2_bytes: int = isa.L2_BYTES
    periph_base: int = isa.PERIPH_BASE
    icache_l0_bytes: int = 512
    icache_line: int = 16
    icache_l15_bytes: int = 4096
    miss_l0_penalty: int = 5
    miss_l15_penalty: int = 20
    l2_data_latency: int = 10
    broadcast: bool = True
    strict_divergence: bool = True
    watchdog_cycles: int = 100_000
    max_cycles: int = 50_000_000

    def __post_init__(self):
        if self.tcdm_bytes % (self.n_banks * self.word_size):
            raise ValueError("tcdm_bytes must be a multiple of n_banks * word_size")
        spans = sorted([(self.tcdm_base, self.tcdm_bytes), (self.l2_base, self.l2_bytes),
                        (self.periph_base, 0x1000)])
        for (a, n), (b, _) in zip(spans, spans[1:]):
            if a + n > b:
                raise ValueError("memory regions overlap")

    @classmethod
    def from_mapping(cls, values: dict) -> "ClusterConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in names:
                raise ValueError(f"unknown cluster config key '{k}'")
            if isinstance(v, str):
                if v.lower() in ("true", "false"):
                    v = v.lower() == "true"
                else:
                    v = int(v, 0)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class Activity:
    """Raw activity counters; the energy model is linear in these."""

    n: int = 16
    fetch: list = None          # IF stage active (instructions fetched)
    l0: list = None             # private I-cache lookups
    l15: list = None            # shared I-cache lookups
    idex: list = None           # instructions through ID/EX
    lsu: list = None            # memory instructions through the LSU
    dotp: list = None           # dot-product operations, per core
    dotp_prec: dict = None      # dot-product operations by A precision
    active_cycles: list = None  # clocked, non-gated core cycles
    gated_cycles: list = None
    tcdm_accesses: int = 0
    interconnect: int = 0
    broadcast_traversals: int = 0

    def __post_init__(self):
        for f in ("fetch", "l0", "l15", "idex", "lsu", "dotp", "active_cycles", "gated_cycles"):
            if getattr(self, f) is None:
                setattr(self, f, [0] * self.n)
        if self.dotp_prec is None:
            self.dotp_prec = {16: 0, 8: 0, 4: 0, 2: 0}

    def __add__(self, other):
        out = Activity(self.n)
        for f in ("fetch", "l0", "l15", "idex", "lsu", "dotp", "active_cycles", "gated_cycles"):
            setattr(out, f, [a + b for a, b in zip(getattr(self, f), getattr(other, f))])
        out.dotp_prec = {k: self.dotp_prec[k] + other.dotp_prec[k] for k in self.dotp_prec}
        for f in ("tcdm_accesses", "interconnect", "broadcast_traversals"):
            setattr(out, f, getattr(self, f) + getattr(other, f))
        return out

    def __sub__(self, other):
        neg = Activity(self.n)
        for f in ("fetch", "l0", "l15", "idex", "lsu", "dotp", "active_cycles", "gated_cycles"):
            setattr(neg, f, [-b for b in getattr(other, f)])
        neg.dotp_prec = {k: -v for k, v in other.dotp_prec.items()}
        for f in ("tcdm_accesses", "interconnect", "broadcast_traversals"):
            setattr(neg, f, -getattr(other, f))
        return self + neg

    def copy(self):
        return self + Activity(self.n)


@dataclass
class Metrics:
    cycles: int = 0
    retired: list = field(default_factory=list)
    tcdm_accesses: int = 0
    bank_conflict_stall_cycles: int = 0
    broadcasts: int = 0
    vlem_entries: int = 0
    vlem_exits: int = 0
    cycles_in_vlem: int = 0
    macs: int = 0
    divergence_warnings: int = 0
    barriers: int = 0
    l0_misses: int = 0
    l15_misses: int = 0
    macctl_zero_warnings: int = 0

    @property
    def instructions_retired(self):
        return sum(self.retired)

    @property
    def macs_per_cycle(self):
        return self.macs / self.cycles if self.cycles else 0.0


class ICache:
    """Private direct-mapped L0 per core in front of a shared direct-mapped L1.5."""

    def __init__(self, cfg: ClusterConfig):
        self.line = cfg.icache_line
        self.n0 = cfg.icache_l0_bytes // cfg.icache_line
        self.n15 = cfg.icache_l15_bytes // cfg.icache_line
        self.l0 = [[None] * self.n0 for _ in range(cfg.n_cores)]
        self.l15 = [None] * self.n15
        self.p0 = cfg.miss_l0_penalty
        self.p15 = cfg.miss_l15_penalty

    def access(self, core_id, pc, act, metrics):
        """Look up ``pc``; returns the stall in cycles (0 on an L0 hit)."""
        line = pc // self.line
        tags = self.l0[core_id]
        act.l0[core_id] += 1
        if tags[line % self.n0] == line:
            return 0
        tags[line % self.n0] = line
        metrics.l0_misses += 1
        act.l15[core_id] += 1
        if self.l15[line % self.n15] == line:
            return self.p0
        self.l15[line % self.n15] = line
        metrics.l15_misses += 1
        return self.p0 + self.p15


def bank_of(addr: int, cfg: ClusterConfig = None) -> int:
    cfg = cfg or _DEFAULT
    off = addr - cfg.tcdm_base
    if not 0 <= off < cfg.tcdm_bytes:
        raise ValueError(f"0x{addr:08x} is not a TCDM address")
    return (off // cfg.word_size) % cfg.n_banks


_DEFAULT = ClusterConfig()


def grant_one_cycle(requests, rr, cfg=_DEFAULT):
    """One round-robin arbitration cycle.

    ``requests`` maps core id -> address; ``rr`` is the per-bank pointer list
    (mutated). Returns the set of core ids granted this cycle.
    """
    by_bank = {}
    for cid, addr in requests.items():
        by_bank.setdefault(bank_of(addr, cfg), []).append(cid)
    granted = set()
    n = cfg.n_cores
    for bank, cids in by_bank.items():
        if len(cids) == 1:
            winner = cids[0]
        else:
            p = rr[bank]
            winner = min(cids, key=lambda c: (c - p) % n)
        rr[bank] = (winner + 1) % n
        granted.add(winner)
    return granted


def arbitrate_mimd(requests: dict, rr=None, cfg=_DEFAULT) -> dict:
    """Grant schedule (core id -> grant cycle offset) for a fixed request set."""
    rr = list(rr) if rr is not None else [0] * cfg.n_banks
    pending = dict(requests)
    sched = {}
    t = 0
    while pending:
        for cid in grant_one_cycle(pending, rr, cfg):
            sched[cid] = t
            del pending[cid]
        t += 1
    return sched


def arbitrate_vlem(requests: dict, is_load=True, broadcast=True, cfg=_DEFAULT):
    """Lockstep arbitration for requests issued in the same cycle.

    Returns ``(cycles, bank_accesses, broadcast_used)``; every grant is
    released together after ``cycles``.
    """
    addrs = set(requests.values())
    if broadcast and is_load and len(addrs) == 1 and len(requests) > 1:
        return 1, 1, True
    per_bank = {}
    for addr in requests.values():
        b = bank_of(addr, cfg)
        per_bank[b] = per_bank.get(b, 0) + 1
    return (max(per_bank.values()) if per_bank else 1), len(requests), False


class _Slot:
    """Scheduling state of one core."""

    __slots__ = ("ready", "pending", "sleep", "sleep_since", "fetched", "halted", "halt_cycle",
                 "stall_since")

    def __init__(self):
        self.ready = 0
        self.pending = None
        self.sleep = None  # None, "barrier" or "vlem"
        self.sleep_since = 0
        self.fetched = False
        self.halted = False
        self.halt_cycle = 0
        self.stall_since = 0


class Cluster:
    def __init__(self, cfg: ClusterConfig | None = None, trace=False):
        self.cfg = cfg or ClusterConfig()
        c = self.cfg
        self.cores = [Core(i) for i in range(c.n_cores)]
        self.tcdm = bytearray(c.tcdm_bytes)
        self.l2 = bytearray(c.l2_bytes)
        self.program = None
        self.trace = [] if trace else None
        self.reset_state()

    def reset_state(self):
        c = self.cfg
        self.cycle = 0
        self.mode = "MIMD"
        self.slots = [_Slot() for _ in range(c.n_cores)]
        self.rr = [0] * c.n_banks
        self.icache = ICache(c)
        self.act = Activity(c.n_cores)
        self.metrics = Metrics(retired=[0] * c.n_cores)
        self.barrier_arrived = set()
        self.vlem_arrived = set()
        self.vlem_since = 0

    # loading

    def load(self, program: Program):
        if not program.text or program.entry is None:
            raise LoadError("program has no entry point")
        c = self.cfg
        if not (c.l2_base <= program.text_base and program.text_end <= c.l2_base + c.l2_bytes):
            if not (c.tcdm_base <= program.text_base and program.text_end <= c.tcdm_base + c.tcdm_bytes):
                raise LoadError("section-overflow: text does not fit its region")
        for sec in program.data_sections:
            mem, off = self._region(sec.base, len(sec.payload))
            if mem is None:
                raise LoadError(f"section-overflow: data section at 0x{sec.base:x} "
                                f"(+{len(sec.payload)}) does not fit {sec.region}")
            mem[off:off + len(sec.payload)] = sec.payload
        self.program = program
        self.text = program.text
        self.text_base = program.text_base
        self.text_end = program.text_end
        self.reset_state()
        for core in self.cores:
            core.reset(program.entry)

    def _region(self, addr, n=1):
        c = self.cfg
        if c.tcdm_base <= addr and addr + n <= c.tcdm_base + c.tcdm_bytes:
            return self.tcdm, addr - c.tcdm_base
        if c.l2_base <= addr and addr + n <= c.l2_base + c.l2_bytes:
            return self.l2, addr - c.l2_base
        return None, 0

    def read(self, addr, width=4):
        mem, off = self._region(addr, width)
        if mem is None:
            raise SimTrap(f"access to unmapped address 0x{addr:08x}")
        return int.from_bytes(mem[off:off + width], "little")

    def write(self, addr, value, width=4):
        mem, off = self._region(addr, width)
        if mem is None:
            raise SimTrap(f"access to unmapped address 0x{addr:08x}")
        mem[off:off + width] = (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little")

    def read_words(self, addr, n):
        return [self.read(addr + 4 * i) for i in range(n)]

    # running

    def run(self, max_cycles=None):
        """Run until every core has fallen off the end of the text section."""
        limit = max_cycles if max_cycles is not None else self.cfg.max_cycles
        while not all(s.halted for s in self.slots):
            if self.cycle >= limit:
                self._finish()
                raise SimTimeout(f"cycle cap {limit} reached", self.metrics, self.cycle)
            self.step()
        return self._finish()

    def _finish(self):
        c = self.cfg
        m = self.metrics
        end = self.cycle
        for i, (s, core) in enumerate(zip(self.slots, self.cores)):
            m.retired[i] = core.retired
        m.cycles = max((s.halt_cycle for s in self.slots if s.halted), default=end)
        m.macs = sum(core.macs for core in self.cores)
        m.macctl_zero_warnings = sum(core.macctl_zero_warnings for core in self.cores)
        # gated/active cycle totals up to the finish cycle
        for i, s in enumerate(self.slots):
            gated = self.act.gated_cycles[i]
            if s.halted:
                gated += m.cycles - s.halt_cycle
            elif s.sleep:
                gated += end - s.sleep_since
            self.act.gated_cycles[i] = gated
            self.act.active_cycles[i] = m.cycles - gated
        for i, core in enumerate(self.cores):
            self.act.dotp[i] = sum(core.dotp_by_prec.values())
        self.act.dotp_prec = {p: sum(core.dotp_by_prec[p] for core in self.cores)
                              for p in (16, 8, 4, 2)}
        if self.mode == "VLEM":
            m.cycles_in_vlem += end - self.vlem_since
            self.vlem_since = end
        return m

    def step(self):
        """Advance one scheduling step (one or more cycles when every core is stalled)."""
        if self.mode == "VLEM":
            self._step_vlem()
        else:
            self._step_mimd()

    def _halt(self, i, t):
        s = self.slots[i]
        s.halted = True
        s.halt_cycle = t
        s.pending = None

    def _check_deadlock(self, t):
        awake = [s for s in self.slots if not s.halted and not s.sleep]
        sleepers = [s for s in self.slots if s.sleep]
        if sleepers and not awake:
            raise DeadlockError("all running cores wait on an event that cannot arrive", cycle=t)
        for i, s in enumerate(self.slots):
            if s.sleep and t - s.sleep_since > self.cfg.watchdog_cycles:
                raise DeadlockError(f"core {i} waiting on {s.sleep} for more than "
                                    f"{self.cfg.watchdog_cycles} cycles", core_id=i, cycle=t)

    def _step_mimd(self):
        t = self.cycle
        cores, slots, text, act = self.cores, self.slots, self.text, self.act
        base, end = self.text_base, self.text_end
        tcdm_lo, tcdm_hi = self.cfg.tcdm_base, self.cfg.tcdm_base + self.cfg.tcdm_bytes
        reqs = {}
        for i, s in enumerate(slots):
            if s.halted or s.sleep or s.ready > t:
                continue
            if s.pending is not None:
                reqs[i] = s.pending
                continue
            core = cores[i]
            pc = core.pc
            if pc == end:
                self._halt(i, t)
                continue
            if not base <= pc < end or pc & 3:
                raise SimTrap("instruction fetch outside .text", i, pc, t)
            if not s.fetched:
                act.fetch[i] += 1
                stall = self.icache.access(i, pc, act, self.metrics)
                if stall:
                    s.fetched = True
                    s.ready = t + stall
                    continue
            s.fetched = False
            ins = text[(pc - base) >> 2]
            if self.trace is not None:
                self.trace.append((t, i, pc, ins.op))
            try:
                res = core.issue(ins)
            except SimTrap as e:
                e.cycle = t
                raise
            act.idex[i] += 1
            if res.__class__ is int:
                s.ready = t + res
                continue
            act.lsu[i] += 1
            if tcdm_lo <= res.addr < tcdm_hi:
                reqs[i] = res
                s.pending = res
                s.stall_since = t
            else:
                self._offcluster(i, res, t)
        if reqs:
            self._grant_mimd(reqs, t)
        if self.mode == "VLEM":
            return
        self.cycle = t + 1
        if not any(s.pending is not None for s in slots):
            nxt = [s.ready for s in slots if not s.halted and not s.sleep]
            if nxt:
                self.cycle = max(t + 1, min(nxt))
            else:
                self._check_deadlock(t)
        if any(s.sleep for s in slots):
            self._check_deadlock(self.cycle)

    def _grant_mimd(self, reqs, t):
        granted = grant_one_cycle({i: r.addr for i, r in reqs.items()}, self.rr, self.cfg)
        m, act = self.metrics, self.act
        for i, r in reqs.items():
            s = self.slots[i]
            if i in granted:
                self._perform(self.cores[i], r, t)
                m.tcdm_accesses += 1
                act.tcdm_accesses += 1
                act.interconnect += 1
                s.pending = None
                s.ready = t + 1
            else:
                m.bank_conflict_stall_cycles += 1

    def _perform(self, core, r, t):
        if r.is_store:
            self.write(r.addr, r.wdata, r.width)
            core.complete(r)
        else:
            core.complete(r, self.read(r.addr, r.width))

    def _offcluster(self, i, r, t):
        """L2 data and peripheral accesses (not arbitrated on the TCDM)."""
        c = self.cfg
        s = self.slots[i]
        core = self.cores[i]
        if c.l2_base <= r.addr < c.l2_base + c.l2_bytes:
            self._perform(core, r, t)
            s.ready = t + c.l2_data_latency
            return
        if r.addr == c.periph_base and not r.is_store:
            core.complete(r, 0)
            self._barrier_arrive(i, t)
            return
        if r.addr == c.periph_base + 0x100:
            if not r.is_store:
                core.complete(r, int(self.mode == "VLEM"))
                s.ready = t + 1
                return
            if r.wdata == 1:
                core.complete(r)
                self._vlem_arrive(i, t)
                return
            if r.wdata == 0:
                raise SimTrap("VLEM exit requested while not in VLEM", i, core.pc, t)
        if r.addr == c.periph_base + 0x200 and not r.is_store:
            core.complete(r, t)
            s.ready = t + 1
            return
        raise SimTrap(f"illegal access to 0x{r.addr:08x}", i, core.pc, t)

    def _barrier_arrive(self, i, t):
        s = self.slots[i]
        s.sleep = "barrier"
        s.sleep_since = t + 1
        self.barrier_arrived.add(i)
        if len(self.barrier_arrived) == self.cfg.n_cores:
            self.metrics.barriers += 1
            for j in self.barrier_arrived:
                sj = self.slots[j]
                self.act.gated_cycles[j] += (t + 2) - sj.sleep_since
                sj.sleep = None
                sj.ready = t + 2
            self.barrier_arrived = set()

    def _vlem_arrive(self, i, t):
        s = self.slots[i]
        s.sleep = "vlem"
        s.sleep_since = t + 1
        self.vlem_arrived.add(i)
        if len(self.vlem_arrived) < self.cfg.n_cores:
            return
        leader_pc = self.cores[0].pc
        for j in self.vlem_arrived:
            sj = self.slots[j]
            self.act.gated_cycles[j] += (t + 1) - sj.sleep_since
            sj.sleep = None
            sj.ready = t + 1
            sj.fetched = False
            if self.cores[j].pc != leader_pc:
                self._diverged(j, self.cores[j].pc, leader_pc, t)
        self.vlem_arrived = set()
        self.mode = "VLEM"
        self.vlem_since = t + 1
        self.vlem_ready = t + 1
        self.metrics.vlem_entries += 1

    def _diverged(self, j, got, want, t):
        if self.cfg.strict_divergence:
            raise DivergenceError(
                f"follower next pc 0x{got:08x} differs from leader 0x{want:08x}", j, got, t)
        self.metrics.divergence_warnings += 1
        self.cores[j].pc = want

    def _step_vlem(self):
        t = max(self.cycle, self.vlem_ready)
        self.cycle = t
        cores, act = self.cores, self.act
        leader = cores[0]
        pc = leader.pc
        group = [i for i, s in enumerate(self.slots) if not s.halted]
        if pc == self.text_end:
            for i in group:
                self._halt(i, t)
            self.metrics.cycles_in_vlem += t - self.vlem_since
            self.vlem_since = t
            return
        if not self.text_base <= pc < self.text_end:
            raise SimTrap("instruction fetch outside .text", 0, pc, t)
        s0 = self.slots[0]
        if not s0.fetched:
            act.fetch[0] += 1
            stall = self.icache.access(0, pc, act, self.metrics)
            if stall:
                s0.fetched = True
                self.vlem_ready = t + stall
                self.cycle = t + stall
                return
        s0.fetched = False
        ins = self.text[(pc - self.text_base) >> 2]
        if self.trace is not None:
            for i in group:
                self.trace.append((t, i, pc, ins.op))
        results = {}
        for i in group:
            try:
                results[i] = cores[i].issue(ins)
            except SimTrap as e:
                e.cycle = t
                raise
            act.idex[i] += 1
        npc = leader.pc
        for i in group:
            if cores[i].pc != npc:
                self._diverged(i, cores[i].pc, npc, t)
        r0 = results[group[0]]
        if r0.__class__ is int:
            cost = max(results.values())
            self.vlem_ready = self.cycle = t + cost
            return
        for i in group:
            act.lsu[i] += 1
        self._vlem_memory(ins, results, t)

    def _vlem_memory(self, ins, results, t):
        c = self.cfg
        m, act = self.metrics, self.act
        first = next(iter(results.values()))
        if first.addr >= c.periph_base and first.addr < c.periph_base + 0x1000:
            addr = first.addr
            if any(r.addr != addr for r in results.values()):
                raise SimTrap("lockstep cores accessed different peripheral registers", cycle=t)
            if addr == c.periph_base + 0x100 and first.is_store:
                if first.wdata == 1:
                    raise SimTrap("nested VLEM entry", 0, self.cores[0].pc, t)
                for i, r in results.items():
                    self.cores[i].complete(r)
                self._vlem_exit(t)
                return
            if addr == c.periph_base and not first.is_store:
                for i, r in results.items():
                    self.cores[i].complete(r, 0)
                m.barriers += 1
                self.vlem_ready = self.cycle = t + 2
                return
            if addr == c.periph_base + 0x200 and not first.is_store:
                for i, r in results.items():
                    self.cores[i].complete(r, t)
                self.vlem_ready = self.cycle = t + 1
                return
            if addr == c.periph_base + 0x100 and not first.is_store:
                for i, r in results.items():
                    self.cores[i].complete(r, 1)
                self.vlem_ready = self.cycle = t + 1
                return
            raise SimTrap(f"illegal access to 0x{addr:08x}", 0, self.cores[0].pc, t)
        tcdm = {}
        extra = 1
        lo, hi = c.tcdm_base, c.tcdm_base + c.tcdm_bytes
        for i, r in results.items():
            if lo <= r.addr < hi:
                tcdm[i] = r
            else:
                self._perform(self.cores[i], r, t)
                extra = max(extra, c.l2_data_latency)
        cycles = 1
        if tcdm:
            cycles, accesses, bcast = arbitrate_vlem(
                {i: r.addr for i, r in tcdm.items()}, not first.is_store, c.broadcast, c)
            if bcast:
                m.broadcasts += 1
                act.tcdm_accesses += 1
                act.broadcast_traversals += 1
                m.tcdm_accesses += 1
            else:
                act.tcdm_accesses += accesses
                act.interconnect += accesses
                m.tcdm_accesses += accesses
            m.bank_conflict_stall_cycles += (cycles - 1) * len(tcdm)
            for i, r in tcdm.items():
                self._perform(self.cores[i], r, t)
        cost = max(cycles, extra)
        self.vlem_ready = self.cycle = t + cost

    def _vlem_exit(self, t):
        leader_pc = self.cores[0].pc
        for i, s in enumerate(self.slots):
            if s.halted:
                continue
            self.cores[i].pc = leader_pc
            s.ready = t + 1
            s.fetched = False
            s.pending = None
        self.mode = "MIMD"
        self.metrics.vlem_exits += 1
        self.metrics.cycles_in_vlem += (t + 1) - self.vlem_since
        self.cycle = t + 1


def run_program(program: Program, cfg: ClusterConfig | None = None, max_cycles=None):
    cl = Cluster(cfg)
    cl.load(program)
    cl.run(max_cycles)
    return cl
