"""Benchmark plumbing: build a kernel, run it on a fresh cluster, verify, account energy.

Every benchmark owns one :class:`~mpcluster.cluster.Cluster`.  Suites of
independent cases can be spread over worker processes; results always come
back in suite order.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..asm import assemble
from ..cluster import (Activity, Cluster, ClusterConfig, DeadlockError, DivergenceError,
                       Metrics, SimTimeout)
from ..core import SimTrap
from ..energy import Breakdown, EnergyParams, ledger_for, report
from ..simdmath import SignMode
from .gen import KernelImage, UnsupportedKernel, gen_conv, gen_matmul, gen_vecadd, sw_supported
from .golden import ConvSpec, golden_conv2d, golden_matmul, random_tensors

FAILURE_KINDS = ("divergence", "deadlock", "timeout", "trap", "mismatch")

# Reference shapes used by the standard experiments.
LADDER_SPEC = ConvSpec(16, 16, 16, 16, K=3, pad=1)            # 16x16x16 tensor, 3x3, 16 filters
THROUGHPUT_SPEC = ConvSpec(8, 8, 32, 64, K=3, pad=1)          # 32 in / 64 out, 3x3
SWEEP_SPEC = ConvSpec(8, 8, 32, 32, K=3, pad=1)
MINI_CNN = (
    ConvSpec(16, 16, 16, 16, K=3, pad=1),
    ConvSpec(16, 16, 16, 16, K=3, pad=1),
    ConvSpec(16, 16, 16, 32, K=3, pad=1),
)
CALIBRATION_MATMUL = dict(P=64, K_len=288, C_out=32)


class BenchFailure(RuntimeError):
    def __init__(self, kind, message, result=None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.result = result


@dataclass
class BenchResult:
    name: str
    metrics: Metrics
    activity: Activity
    energy: Breakdown
    macs: int
    verified: bool
    failure: str | None = None
    detail: str = "ok"
    case: "BenchCase | None" = None
    extra: dict = field(default_factory=dict)

    @property
    def cycles(self):
        return self.metrics.cycles

    @property
    def macs_per_cycle(self):
        return self.macs / self.metrics.cycles if self.metrics.cycles else 0.0

    @property
    def ok(self):
        return self.failure is None and self.verified

    def raise_for_failure(self):
        if self.failure:
            raise BenchFailure(self.failure, self.detail, self)
        return self


@dataclass(frozen=True)
class BenchCase:
    """One runnable benchmark: a layer (or matmul/vecadd) plus execution choices."""

    kind: str = "conv"                  # conv | matmul | vecadd
    spec: ConvSpec | None = None
    mode: str = "VLEM"
    path: str = "hw"
    layout: str = "misaligned"
    broadcast: bool | None = None       # None: take it from the cluster config
    seed: int = 0
    name: str | None = None
    n: int = 1024                       # vecadd only
    chunk: int = 1
    s: int = 4

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind == "vecadd":
            return f"vecadd_n{self.n}_c{self.chunk}_s{self.s}_{self.mode}"
        bc = "_nobcast" if self.broadcast is False else ""
        stem = self.spec.name if self.kind == "conv" else f"{self.kind}_{self.spec.name}"
        return f"{stem}_{self.mode}_{self.path}_{self.layout}{bc}"

    def build(self):
        if self.kind == "vecadd":
            return gen_vecadd(self.n, self.chunk, self.s, mode=self.mode, seed=self.seed)
        rng = np.random.default_rng(self.seed)
        spec = self.spec
        x, w = random_tensors(spec, rng)
        if self.kind == "conv":
            return gen_conv(spec, x, w, golden_conv2d(x, w, spec), mode=self.mode,
                            path=self.path, layout=self.layout, name=self.label)
        if self.kind == "matmul":
            if spec.K != 1 or spec.H != 1:
                raise UnsupportedKernel("matmul cases use H=1, K=1 shapes")
            acts = x.reshape(spec.W, spec.C_in)
            wts = w.reshape(spec.C_out, spec.C_in)
            return gen_matmul(spec.W, spec.C_in, spec.C_out, acts, wts,
                              golden_matmul(acts, wts), act_bits=spec.act_bits,
                              wgt_bits=spec.wgt_bits, sign=spec.sign,
                              pixel_block=spec.pixel_block, mode=self.mode, path=self.path,
                              layout=self.layout, name=self.label)
        raise UnsupportedKernel(f"unknown benchmark kind '{self.kind}'")


def matmul_spec(P, K_len, C_out, act_bits=8, wgt_bits=8, sign=SignMode.SS, pixel_block=2):
    return ConvSpec(1, P, K_len, C_out, K=1, act_bits=act_bits, wgt_bits=wgt_bits,
                    sign=sign, pixel_block=pixel_block)


def run_image(img, cfg: ClusterConfig | None = None, params: EnergyParams | None = None,
              max_cycles=None, name=None, macs=None) -> BenchResult:
    """Assemble, load and run a generated kernel, then verify and account energy."""
    cfg = cfg or ClusterConfig()
    params = params or EnergyParams.default()
    prog = assemble(img.source, filename=f"<{name or getattr(img, 'name', 'kernel')}>")
    cl = Cluster(cfg)
    cl.load(prog)
    failure, detail = None, "ok"
    try:
        metrics = cl.run(max_cycles)
    except DivergenceError as exc:
        failure, detail, metrics = "divergence", str(exc), cl._finish()
    except DeadlockError as exc:
        failure, detail, metrics = "deadlock", str(exc), cl._finish()
    except SimTimeout as exc:
        failure, detail, metrics = "timeout", str(exc), exc.metrics
    except SimTrap as exc:
        failure, detail, metrics = "trap", str(exc), cl._finish()
    verified = False
    if failure is None:
        verified, detail = img.check(cl)
        if not verified:
            failure = "mismatch"
    macs = macs if macs is not None else getattr(img, "macs", metrics.macs)
    energy = report(ledger_for(cl.act, params), max(metrics.cycles, 1))
    return BenchResult(name or getattr(img, "name", "kernel"), metrics, cl.act.copy(), energy,
                       macs, verified, failure, detail)


def _case_config(case: BenchCase, cfg: ClusterConfig | None):
    cfg = cfg or ClusterConfig()
    if case.broadcast is not None and case.broadcast != cfg.broadcast:
        cfg = dataclasses.replace(cfg, broadcast=case.broadcast)
    return cfg


def run_case(case: BenchCase, cfg=None, params=None, max_cycles=None) -> BenchResult:
    img = case.build()
    cfg = _case_config(case, cfg)
    res = run_image(img, cfg, params, max_cycles, name=case.label)
    res.case = case
    res.extra["broadcast"] = cfg.broadcast
    return res


def _run_case_job(args):
    return run_case(*args)


def run_bench(target, cfg: ClusterConfig | None = None, params: EnergyParams | None = None,
              max_cycles=None, jobs: int = 1):
    """Run one :class:`BenchCase` (returns a result) or a list of them (returns a list)."""
    if isinstance(target, BenchCase):
        return run_case(target, cfg, params, max_cycles)
    cases = list(target)
    if jobs > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_case_job, [(c, cfg, params, max_cycles) for c in cases]))
    return [run_case(c, cfg, params, max_cycles) for c in cases]


# standard experiments

def calibration_pair(cfg=None, params=None, jobs=1):
    """8-bit parallel matmul in MIMD and in lockstep mode (misaligned buffers)."""
    spec = matmul_spec(**CALIBRATION_MATMUL)
    cases = [BenchCase("matmul", spec, mode=m, name=f"matmul8_{m}") for m in ("MIMD", "VLEM")]
    mimd, vlem = run_bench(cases, cfg, params, jobs=jobs)
    return mimd.raise_for_failure(), vlem.raise_for_failure()


LADDER_VARIANTS = {
    "naive": dict(layout="packed", broadcast=False),
    "broadcast": dict(layout="packed", broadcast=True),
    "misaligned": dict(layout="misaligned", broadcast=True),
}


def conflict_ladder(spec: ConvSpec = LADDER_SPEC, cfg=None, params=None, jobs=1):
    """Lockstep cycle overhead vs. MIMD for the three countermeasure levels."""
    cases = [BenchCase("conv", spec, mode="MIMD", layout="packed", name="mimd")]
    cases += [BenchCase("conv", spec, mode="VLEM", name=k, **v)
              for k, v in LADDER_VARIANTS.items()]
    results = [r.raise_for_failure() for r in run_bench(cases, cfg, params, jobs=jobs)]
    base = results[0]
    out = {"mimd": base}
    for r in results[1:]:
        r.extra["overhead_pct"] = 100.0 * (r.cycles / base.cycles - 1.0)
        out[r.name] = r
    return out


def format_pairs():
    return [(a, w) for a in (16, 8, 4, 2) for w in (16, 8, 4, 2)]


def format_category(act_bits, wgt_bits):
    if wgt_bits < 8:
        return "weight-sub-byte"
    if act_bits < 8:
        return "activation-only-sub-byte"
    return "byte-or-wider"


def format_sweep(base: ConvSpec = SWEEP_SPEC, mode="VLEM", cfg=None, params=None, jobs=1,
                 pairs=None):
    """Hardware and (where expressible) software path for each precision pair."""
    cases = []
    for a, w in pairs or format_pairs():
        spec = dataclasses.replace(base, act_bits=a, wgt_bits=w)
        for path in ("hw", "sw"):
            if path == "sw" and not sw_supported(spec):
                continue
            cases.append(BenchCase("conv", spec, mode=mode, path=path))
    results = [r.raise_for_failure() for r in run_bench(cases, cfg, params, jobs=jobs)]
    rows = {}
    for case, res in zip(cases, results):
        rows.setdefault((case.spec.act_bits, case.spec.wgt_bits), {})[case.path] = res
    for (a, w), pair in rows.items():
        if "sw" in pair:
            pair["hw"].extra["speedup"] = pair["sw"].cycles / pair["hw"].cycles
    return rows


def throughput(spec: ConvSpec = THROUGHPUT_SPEC, cfg=None, params=None):
    return run_case(BenchCase("conv", spec, mode="VLEM"), cfg, params).raise_for_failure()


def mini_cnn(act_bits=8, wgt_bits=8, mode="VLEM", path="hw", layers=MINI_CNN, cfg=None,
             params=None, jobs=1, seed=0):
    """Run each layer as its own program and sum cycles/energy over the network."""
    cases = [BenchCase("conv", dataclasses.replace(s, act_bits=act_bits, wgt_bits=wgt_bits),
                       mode=mode, path=path, seed=seed + i, name=f"layer{i}")
             for i, s in enumerate(layers)]
    results = [r.raise_for_failure() for r in run_bench(cases, cfg, params, jobs=jobs)]
    return NetworkResult(results)


@dataclass
class NetworkResult:
    layers: list

    @property
    def cycles(self):
        return sum(r.cycles for r in self.layers)

    @property
    def energy_pJ(self):
        return sum(r.energy.total_pJ for r in self.layers)

    @property
    def macs(self):
        return sum(r.macs for r in self.layers)


# suite files

SUITE_KEYS = {"kind", "name", "H", "W", "C_in", "C_out", "K", "pad", "act_bits", "wgt_bits",
              "sign", "pixel_block", "mode", "path", "layout", "broadcast", "seed", "n",
              "chunk", "s", "P", "K_len"}
EXPANDING_KINDS = ("conflict", "formats")


class SuiteError(ValueError):
    pass


def _bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise SuiteError(f"expected a boolean, got '{v}'")


def parse_suite(text: str) -> list[dict]:
    """Blank-line separated blocks of ``key=value`` lines; ``#`` starts a comment."""
    blocks, cur = [], {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if cur:
                blocks.append(cur)
                cur = {}
            continue
        if "=" not in line:
            raise SuiteError(f"line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SUITE_KEYS:
            raise SuiteError(f"line {n}: unknown key '{k}'")
        if k in cur:
            raise SuiteError(f"line {n}: duplicate key '{k}' in block")
        cur[k] = v
    if cur:
        blocks.append(cur)
    if not blocks:
        raise SuiteError("suite file contains no benchmark blocks")
    return blocks


def block_spec(block: dict) -> ConvSpec:
    ints = {k: int(block[k], 0) for k in ("H", "W", "C_in", "C_out", "K", "pad", "act_bits",
                                           "wgt_bits", "pixel_block") if k in block}
    if block.get("kind") == "matmul":
        P, K_len = int(block.get("P", "64"), 0), int(block.get("K_len", "288"), 0)
        return matmul_spec(P, K_len, ints.get("C_out", 32), ints.get("act_bits", 8),
                           ints.get("wgt_bits", 8), SignMode[block.get("sign", "SS").upper()],
                           ints.get("pixel_block", 2))
    base = LADDER_SPEC if block.get("kind") == "conflict" else (
        SWEEP_SPEC if block.get("kind") == "formats" else THROUGHPUT_SPEC)
    if "sign" in block:
        ints["sign"] = SignMode[block["sign"].upper()]
    return dataclasses.replace(base, **ints)


def block_cases(block: dict) -> list[BenchCase]:
    """Expand one suite block into runnable cases (conflict/formats blocks expand)."""
    try:
        kind = block.get("kind", "conv")
        seed = int(block.get("seed", "0"), 0)
        if kind == "vecadd":
            return [BenchCase("vecadd", None, mode=block.get("mode", "VLEM"), seed=seed,
                              n=int(block.get("n", "1024"), 0),
                              chunk=int(block.get("chunk", "1"), 0),
                              s=int(block.get("s", "4"), 0), name=block.get("name"))]
        spec = block_spec(block)
        if kind == "conflict":
            cases = [BenchCase("conv", spec, mode="MIMD", layout="packed", seed=seed,
                               name="mimd")]
            return cases + [BenchCase("conv", spec, mode="VLEM", seed=seed, name=k, **v)
                            for k, v in LADDER_VARIANTS.items()]
        if kind == "formats":
            out = []
            for a, w in format_pairs():
                s = dataclasses.replace(spec, act_bits=a, wgt_bits=w)
                for path in ("hw", "sw"):
                    if path == "hw" or sw_supported(s):
                        out.append(BenchCase("conv", s, mode=block.get("mode", "VLEM"),
                                             path=path, seed=seed))
            return out
        if kind not in ("conv", "matmul"):
            raise SuiteError(f"unknown kind '{kind}'")
        return [BenchCase(kind, spec, mode=block.get("mode", "VLEM"),
                          path=block.get("path", "hw"),
                          layout=block.get("layout", "misaligned"),
                          broadcast=_bool(block["broadcast"]) if "broadcast" in block else None,
                          seed=seed,
                          name=block.get("name"))]
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SuiteError):
            raise
        raise SuiteError(f"invalid block {block}: {exc}") from exc


ROW_FIELDS = ("index", "block", "name", "kind", "mode", "path", "layout", "broadcast",
              "act_bits", "wgt_bits", "cycles", "instructions_retired", "macs",
              "macs_per_cycle", "conflict_stall_cycles", "broadcasts", "energy_pJ",
              "pJ_per_cycle", "verified", "failure", "overhead_pct", "speedup")


def result_row(index, block_index, res: BenchResult) -> dict:
    c = res.case
    spec = c.spec if c is not None else None
    return {
        "index": index, "block": block_index, "name": res.name,
        "kind": c.kind if c else "", "mode": c.mode if c else "",
        "path": c.path if c else "", "layout": c.layout if c else "",
        "broadcast": res.extra.get("broadcast", c.broadcast if c else ""),
        "act_bits": spec.act_bits if spec else "", "wgt_bits": spec.wgt_bits if spec else "",
        "cycles": res.cycles, "instructions_retired": res.metrics.instructions_retired,
        "macs": res.macs, "macs_per_cycle": round(res.macs_per_cycle, 6),
        "conflict_stall_cycles": res.metrics.bank_conflict_stall_cycles,
        "broadcasts": res.metrics.broadcasts, "energy_pJ": round(res.energy.total_pJ, 6),
        "pJ_per_cycle": round(res.energy.pJ_per_cycle, 6), "verified": res.verified,
        "failure": res.failure or "",
        "overhead_pct": round(res.extra["overhead_pct"], 4) if "overhead_pct" in res.extra else "",
        "speedup": round(res.extra["speedup"], 6) if "speedup" in res.extra else "",
    }


def run_suite(blocks, cfg=None, params=None, jobs=1, max_cycles=None) -> list[dict]:
    """Run every block and return one CSV-ready row per expanded case."""
    expanded = [(bi, case) for bi, b in enumerate(blocks) for case in block_cases(b)]
    results = run_bench([c for _, c in expanded], cfg, params, max_cycles, jobs)
    derive_columns(blocks, expanded, results)
    return [result_row(i, bi, r) for i, ((bi, _), r) in enumerate(zip(expanded, results))]


def derive_columns(blocks, expanded, results):
    """Fill overhead (conflict blocks) and speedup (format blocks) from sibling results."""
    for bi, block in enumerate(blocks):
        mine = [r for (b, _), r in zip(expanded, results) if b == bi]
        kind = block.get("kind", "conv")
        if kind == "conflict" and mine and mine[0].cycles:
            for r in mine[1:]:
                r.extra["overhead_pct"] = 100.0 * (r.cycles / mine[0].cycles - 1.0)
        if kind == "formats":
            hw = {(r.case.spec.act_bits, r.case.spec.wgt_bits): r for r in mine
                  if r.case.path == "hw"}
            for r in mine:
                if r.case.path == "sw":
                    h = hw[(r.case.spec.act_bits, r.case.spec.wgt_bits)]
                    h.extra["speedup"] = r.cycles / h.cycles
