"""Command-line entry point: ``mpcluster {asm,run,bench,sweep}``.

Exit codes: 0 success, 1 input error, 2 simulation trap or divergence,
3 verification mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import sys

from . import __version__
from .asm import AssemblyFailed, assemble, disassemble, format_instruction
from .cluster import Cluster, ClusterConfig, LoadError, SimTimeout
from .core import SimTrap
from .energy import EnergyParams, ledger_for, parse_kv, report
from .kernels import bench

EXIT_OK, EXIT_INPUT, EXIT_TRAP, EXIT_MISMATCH = 0, 1, 2, 3


class InputError(Exception):
    pass


def _read(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc


def _emit(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def load_config(path) -> ClusterConfig:
    if path is None:
        return ClusterConfig()
    try:
        return ClusterConfig.from_mapping(parse_kv(_read(path)))
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_params(path) -> EnergyParams:
    if path is None:
        return EnergyParams.default()
    try:
        return EnergyParams.parse(_read(path))
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# asm

def listing(program) -> str:
    """Address, label and instruction per line, followed by a data-section summary."""
    by_addr = {}
    for name, addr in sorted(program.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        by_addr.setdefault(addr, []).append(name)

    def label_of(a):
        return by_addr[a][0] if a in by_addr else f"0x{a:x}"

    lines = []
    for i, ins in enumerate(program.text):
        addr = program.text_base + 4 * i
        for name in by_addr.get(addr, []):
            lines.append(f"{'':10}{name}:")
        lines.append(f"{addr:08x}:   {format_instruction(ins, label_of)}")
    for sec in program.data_sections:
        lines.append(f"# data {sec.region} 0x{sec.base:08x} +{len(sec.payload)} bytes")
    return "\n".join(lines) + "\n"


def cmd_asm(args) -> int:
    src = _read(args.input)
    try:
        program = assemble(src, filename=args.input)
    except AssemblyFailed as exc:
        for err in exc.errors:
            print(err, file=sys.stderr)
        return EXIT_INPUT
    _emit(disassemble(program) if args.disasm else listing(program), args.output)
    return EXIT_OK


# run

def metrics_report(metrics, act, breakdown) -> dict:
    per_core = [{"core": i, "instructions_retired": metrics.retired[i],
                 "active_cycles": act.active_cycles[i], "gated_cycles": act.gated_cycles[i],
                 "fetches": act.fetch[i], "dotp": act.dotp[i]}
                for i in range(len(metrics.retired))]
    return {
        "cycles": metrics.cycles,
        "instructions_retired": metrics.instructions_retired,
        "per_core": per_core,
        "tcdm": {"accesses": metrics.tcdm_accesses,
                 "conflict_stall_cycles": metrics.bank_conflict_stall_cycles,
                 "broadcasts": metrics.broadcasts},
        "vlem": {"entries": metrics.vlem_entries, "exits": metrics.vlem_exits,
                 "cycles_in_vlem": metrics.cycles_in_vlem,
                 "divergence_warnings": metrics.divergence_warnings},
        "energy": {"total_pJ": breakdown.total_pJ, "by_unit": dict(breakdown.by_unit),
                   "pJ_per_cycle": breakdown.pJ_per_cycle},
        "macs": metrics.macs,
        "macs_per_cycle": metrics.macs_per_cycle,
    }


def cmd_run(args) -> int:
    src = _read(args.program)
    cfg = load_config(args.config)
    if args.strict is not None:
        cfg = dataclasses.replace(cfg, strict_divergence=args.strict)
    params = load_params(args.energy_params)
    try:
        program = assemble(src, filename=args.program, l2_bytes=cfg.l2_bytes)
    except AssemblyFailed as exc:
        for err in exc.errors:
            print(err, file=sys.stderr)
        return EXIT_INPUT
    cl = Cluster(cfg)
    try:
        cl.load(program)
    except LoadError as exc:
        print(f"{args.program}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    status, code = "ok", EXIT_OK
    try:
        metrics = cl.run(args.max_cycles)
    except SimTimeout as exc:
        status, code, metrics = "timeout", EXIT_TRAP, exc.metrics
        print(f"{args.program}: {exc}", file=sys.stderr)
    except SimTrap as exc:
        status, code, metrics = type(exc).__name__, EXIT_TRAP, cl._finish()
        print(f"{args.program}: {exc}", file=sys.stderr)
    breakdown = report(ledger_for(cl.act, params), max(metrics.cycles, 1))
    out = {
        "tool": {"name": "mpcluster", "version": __version__},
        "input": {"path": args.program,
                  "sha256": hashlib.sha256(src.encode("utf-8")).hexdigest()},
        "config": dataclasses.asdict(cfg),
        "energy_params": dataclasses.asdict(params),
        "status": status,
        "verified": None,
        **metrics_report(metrics, cl.act, breakdown),
    }
    text = dumps_json(out)
    if args.json:
        _emit(text, args.json)
    else:
        print(f"status={status} cycles={metrics.cycles} "
              f"instructions={metrics.instructions_retired} macs={metrics.macs} "
              f"energy_pJ={breakdown.total_pJ:.3f}")
    return code


# bench / sweep

def rows_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in fields})
    return buf.getvalue()


def rows_table(rows) -> str:
    cols = ("index", "name", "cycles", "macs_per_cycle", "conflict_stall_cycles",
            "energy_pJ", "verified", "overhead_pct", "speedup")
    lines = ["  ".join(cols)]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def rows_exit_code(rows) -> int:
    if any(r["failure"] == "mismatch" for r in rows):
        return EXIT_MISMATCH
    if any(r["failure"] for r in rows):
        return EXIT_TRAP
    return EXIT_OK


def _suite_blocks(path, parser):
    try:
        return bench.parse_suite(_read(path))
    except bench.SuiteError as exc:
        parser.print_usage(sys.stderr)
        raise InputError(f"{path}: {exc}") from exc


def cmd_bench(args, parser) -> int:
    blocks = _suite_blocks(args.suite, parser)
    cfg, params = load_config(args.config), load_params(args.energy_params)
    try:
        rows = bench.run_suite(blocks, cfg, params, jobs=args.jobs)
    except (bench.SuiteError, bench.UnsupportedKernel) as exc:
        raise InputError(f"{args.suite}: {exc}") from exc
    if args.csv:
        _emit(rows_csv(rows, bench.ROW_FIELDS), args.csv)
    if args.json:
        _emit(dumps_json({"tool": {"name": "mpcluster", "version": __version__},
                          "rows": rows}), args.json)
    if args.csv != "-" and args.json != "-":
        sys.stdout.write(rows_table(rows))
    return rows_exit_code(rows)


DEFAULT_SWEEP_SUITE = [
    {"kind": "matmul", "mode": "MIMD", "name": "matmul8_MIMD"},
    {"kind": "matmul", "mode": "VLEM", "name": "matmul8_VLEM"},
]
ENERGY_KEYS = {f.name for f in dataclasses.fields(EnergyParams)}
CONFIG_KEYS = {f.name for f in dataclasses.fields(ClusterConfig)}


def parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"malformed grid entry '{item}' (expected key=v1,v2,...)")
        key, vals = (s.strip() for s in item.split("=", 1))
        if key not in ENERGY_KEYS | CONFIG_KEYS:
            raise InputError(f"unknown grid parameter '{key}'")
        if key in grid:
            raise InputError(f"grid parameter '{key}' given twice")
        values = [v.strip() for v in vals.split(",") if v.strip()]
        if not values:
            raise InputError(f"grid parameter '{key}' has no values")
        try:
            if key in ENERGY_KEYS:
                values = [float(v) for v in values]
            else:
                values = [ClusterConfig.from_mapping({key: v}) and v for v in values]
        except ValueError as exc:
            raise InputError(f"grid parameter '{key}': {exc}") from exc
        grid[key] = values
    if not grid:
        raise InputError("empty parameter grid")
    return grid


def _savings(rows):
    """Per VLEM row: percent lower energy per cycle than the matching MIMD row."""
    mimd = {(r["kind"], r["act_bits"], r["wgt_bits"], r["path"]): r for r in rows
            if r["mode"] == "MIMD"}
    for r in rows:
        m = mimd.get((r["kind"], r["act_bits"], r["wgt_bits"], r["path"]))
        if r["mode"] == "VLEM" and m and m["pJ_per_cycle"]:
            r["vlem_savings_pct"] = round(100.0 * (1 - r["pJ_per_cycle"] / m["pJ_per_cycle"]), 6)
        else:
            r["vlem_savings_pct"] = ""
    return rows


def cmd_sweep(args, parser) -> int:
    grid = parse_grid(args.grid)
    blocks = _suite_blocks(args.suite, parser) if args.suite else DEFAULT_SWEEP_SUITE
    base_cfg, base_params = load_config(args.config), load_params(args.energy_params)
    keys = list(grid)
    cases = [(bi, c) for bi, b in enumerate(blocks) for c in bench.block_cases(b)]
    sim_cache = {}
    out_rows = []
    for point in itertools.product(*(grid[k] for k in keys)):
        assignment = dict(zip(keys, point))
        cfg_kw = {k: v for k, v in assignment.items() if k in CONFIG_KEYS}
        en_kw = {k: v for k, v in assignment.items() if k in ENERGY_KEYS}
        try:
            cfg = _with_config(base_cfg, cfg_kw)
            params = base_params.replace(**en_kw)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        ck = tuple(sorted(cfg_kw.items()))
        if ck not in sim_cache:
            sim_cache[ck] = bench.run_bench([c for _, c in cases], cfg, base_params,
                                            jobs=args.jobs)
        results = []
        for res in sim_cache[ck]:
            res = dataclasses.replace(res, extra=dict(res.extra),
                                      energy=report(ledger_for(res.activity, params),
                                                    max(res.cycles, 1)))
            results.append(res)
        bench.derive_columns(blocks, cases, results)
        rows = [bench.result_row(i, bi, r) for i, ((bi, _), r) in enumerate(zip(cases, results))]
        for r in _savings(rows):
            out_rows.append({**assignment, **r})
    fields = keys + list(bench.ROW_FIELDS) + ["vlem_savings_pct"]
    _emit(rows_csv(out_rows, fields), args.csv or "-")
    return rows_exit_code(out_rows)


def _with_config(cfg, overrides):
    if not overrides:
        return cfg
    merged = {**{k: v for k, v in dataclasses.asdict(cfg).items()}, **overrides}
    return ClusterConfig.from_mapping(merged)


# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcluster", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("asm", help="assemble a source file and print a listing")
    a.add_argument("input")
    a.add_argument("-o", "--output", help="write to this file instead of stdout")
    a.add_argument("--disasm", action="store_true",
                   help="emit re-assemblable source instead of a listing")

    r = sub.add_parser("run", help="assemble and simulate a program")
    r.add_argument("program")
    r.add_argument("--config", help="cluster configuration (key=value file)")
    r.add_argument("--energy-params", help="energy parameter file (key=value, pJ)")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--mode-strict-divergence", dest="strict", action="store_const", const=True,
                   help="trap on lockstep divergence")
    g.add_argument("--permissive-divergence", dest="strict", action="store_const",
                   const=False, help="warn and follow the leader on divergence")
    r.add_argument("--max-cycles", type=int, help="cycle cap (default from config)")
    r.add_argument("--json", help="write the JSON report here ('-' for stdout)")

    b = sub.add_parser("bench", help="run a benchmark suite file")
    b.add_argument("--suite", required=True, help="suite file (key=value blocks)")
    b.add_argument("--csv", help="write CSV rows here ('-' for stdout)")
    b.add_argument("--json", help="write JSON rows here ('-' for stdout)")
    b.add_argument("--config")
    b.add_argument("--energy-params")
    b.add_argument("--jobs", type=int, default=1, help="worker processes")

    s = sub.add_parser("sweep", help="run a suite over a parameter grid, CSV output")
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2,...",
                   help="energy parameter or cluster config key with values (repeatable)")
    s.add_argument("--suite", help="suite file (default: 8-bit matmul MIMD vs lockstep)")
    s.add_argument("--csv", help="output file (default stdout)")
    s.add_argument("--config")
    s.add_argument("--energy-params")
    s.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "asm":
            return cmd_asm(args)
        if args.command == "run":
            return cmd_run(args)
        if args.command == "bench":
            return cmd_bench(args, parser)
        return cmd_sweep(args, parser)
    except InputError as exc:
        print(f"mpcluster: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
