"""Event-based energy accounting: activity counters times per-event pJ costs.

Default parameters are calibrated, not measured: they were tuned so that the
8-bit parallel matmul benchmark spends 0.60-0.64x the MIMD energy per cycle
in lockstep mode (see :func:`calibrate_check`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources

from .cluster import Activity

UNITS = ("IF", "ICACHE", "IDEX", "LSU", "TCDM", "INTERCONNECT", "LEAKAGE")


@dataclass
class EnergyParams:
    """pJ per event."""

    if_stage_active: float = 0.0
    icache_l0_access: float = 0.0
    icache_l15_access: float = 0.0
    idex_active: float = 0.0
    idex_simd_extra: float = 0.0
    lsu_access: float = 0.0
    tcdm_bank_access: float = 0.0
    interconnect_traversal: float = 0.0
    broadcast_traversal: float = 0.0
    leakage_per_core_cycle: float = 0.0
    gated_core_cycle: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = float(getattr(self, f.name))
            if v < 0:
                raise ValueError(f"{f.name} must be non-negative")
            setattr(self, f.name, v)

    def replace(self, **kw) -> "EnergyParams":
        return dataclasses.replace(self, **kw)

    @classmethod
    def parse(cls, text: str) -> "EnergyParams":
        return cls(**parse_kv(text, {f.name for f in dataclasses.fields(cls)}))

    @classmethod
    def from_file(cls, path) -> "EnergyParams":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def default(cls) -> "EnergyParams":
        text = resources.files("mpcluster").joinpath("data/default_energy.params").read_text()
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))


def parse_kv(text: str, allowed=None) -> dict:
    """Flat ``key=value`` text, one pair per line, ``#`` comments."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if allowed is not None and k not in allowed:
            raise ValueError(f"line {n}: unknown key '{k}'")
        out[k] = v
    return out


@dataclass
class EnergyLedger:
    n_cores: int = 16
    per_core: dict = field(default_factory=dict)  # unit -> list[pJ]
    shared: dict = field(default_factory=dict)    # unit -> pJ (TCDM banks, interconnect)

    def __post_init__(self):
        for u in UNITS:
            self.per_core.setdefault(u, [0.0] * self.n_cores)
            self.shared.setdefault(u, 0.0)

    def unit_total(self, unit):
        return sum(self.per_core[unit]) + self.shared[unit]

    @property
    def by_unit(self):
        return {u: self.unit_total(u) for u in UNITS}

    @property
    def total(self):
        return sum(self.by_unit.values())

    def __add__(self, other):
        out = EnergyLedger(self.n_cores)
        for u in UNITS:
            out.per_core[u] = [a + b for a, b in zip(self.per_core[u], other.per_core[u])]
            out.shared[u] = self.shared[u] + other.shared[u]
        return out


def accrue(ledger: EnergyLedger, act: Activity, p: EnergyParams) -> EnergyLedger:
    """Add the energy of ``act`` to ``ledger`` in place (and return it)."""
    pc = ledger.per_core
    for i in range(ledger.n_cores):
        pc["IF"][i] += act.fetch[i] * p.if_stage_active
        pc["ICACHE"][i] += act.l0[i] * p.icache_l0_access + act.l15[i] * p.icache_l15_access
        pc["IDEX"][i] += act.idex[i] * p.idex_active + act.dotp[i] * p.idex_simd_extra
        pc["LSU"][i] += act.lsu[i] * p.lsu_access
        pc["LEAKAGE"][i] += (act.active_cycles[i] * p.leakage_per_core_cycle
                             + act.gated_cycles[i] * p.gated_core_cycle)
    ledger.shared["TCDM"] += act.tcdm_accesses * p.tcdm_bank_access
    ledger.shared["INTERCONNECT"] += (act.interconnect * p.interconnect_traversal
                                      + act.broadcast_traversals * p.broadcast_traversal)
    return ledger


def ledger_for(act: Activity, p: EnergyParams) -> EnergyLedger:
    return accrue(EnergyLedger(act.n), act, p)


@dataclass
class Breakdown:
    total_pJ: float
    by_unit: dict
    shares: dict
    pJ_per_cycle: float

    @property
    def largest(self):
        return max(self.by_unit, key=self.by_unit.get)

    def as_dict(self):
        return {"total_pJ": self.total_pJ, "by_unit": dict(self.by_unit),
                "shares": dict(self.shares), "pJ_per_cycle": self.pJ_per_cycle}


def report(ledger: EnergyLedger, cycles: int) -> Breakdown:
    if cycles <= 0:
        raise ValueError("cycles must be positive")
    by_unit = ledger.by_unit
    total = sum(by_unit.values())
    shares = {u: (100.0 * v / total if total else 0.0) for u, v in by_unit.items()}
    return Breakdown(total, by_unit, shares, total / cycles)


@dataclass
class CalibrationResult:
    passed: bool
    ratio: float
    mimd_pJ_per_cycle: float
    vlem_pJ_per_cycle: float
    cycle_delta: float
    unit_deltas: dict
    low: float = 0.60
    high: float = 0.64

    def __str__(self):
        verdict = "pass" if self.passed else "fail"
        return (f"{verdict}: VLEM/MIMD energy per cycle = {self.ratio:.4f} "
                f"(band [{self.low}, {self.high}]), cycle delta {100 * self.cycle_delta:+.2f}%")


def calibrate_check(params: EnergyParams | None = None, low=0.60, high=0.64,
                    pair=None) -> CalibrationResult:
    """Run the 8-bit parallel matmul in MIMD and VLEM and compare energy per cycle.

    ``pair`` may pass in an already simulated ``(mimd, vlem)`` result pair so
    several parameter sets can be checked against one simulation.
    """
    from .kernels.bench import calibration_pair

    params = params or EnergyParams.default()
    mimd, vlem = pair if pair is not None else calibration_pair()
    rm = report(ledger_for(mimd.activity, params), mimd.metrics.cycles)
    rv = report(ledger_for(vlem.activity, params), vlem.metrics.cycles)
    ratio = rv.pJ_per_cycle / rm.pJ_per_cycle if rm.pJ_per_cycle else float("nan")
    deltas = {u: rv.by_unit[u] / vlem.metrics.cycles - rm.by_unit[u] / mimd.metrics.cycles
              for u in UNITS}
    cd = vlem.metrics.cycles / mimd.metrics.cycles - 1.0
    ok = rm.pJ_per_cycle > 0 and low <= ratio <= high
    return CalibrationResult(ok, ratio, rm.pJ_per_cycle, rv.pJ_per_cycle, cd, deltas, low, high)
