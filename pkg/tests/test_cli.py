import csv
import io
import json
from pathlib import Path

import pytest

from mpcluster.cli import EXIT_INPUT, EXIT_OK, EXIT_TRAP, main
from mpcluster.energy import EnergyParams

ROOT = Path(__file__).resolve().parents[1]
PROGRAMS = ROOT / "programs"
SMOKE = ROOT / "suites" / "smoke.suite"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def good(tmp_path):
    f = tmp_path / "good.s"
    f.write_text("_start: addi x5, x0, 42\nloop: p.lw x6, 4(x7!)\n")
    return f


class TestAsm:
    def test_listing(self, capsys, good):
        code, out, err = run(capsys, "asm", good)
        assert code == EXIT_OK and err == ""
        assert "addi" in out and "p.lw" in out and "_start" in out

    def test_error_diagnostics(self, capsys, tmp_path):
        f = tmp_path / "bad.s"
        f.write_text("nop\naddi x5, x0\nfrob x1\n")
        code, out, err = run(capsys, "asm", f)
        assert code == EXIT_INPUT and out == ""
        lines = err.strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith(f"{f}:2:") and "bad-operand" in lines[0]
        assert lines[1].startswith(f"{f}:3:") and "unknown-mnemonic" in lines[1]

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "asm", tmp_path / "nope.s")
        assert code == EXIT_INPUT and err

    def test_disasm_round_trip(self, capsys, tmp_path):
        src = PROGRAMS / "dotp_lockstep.s"
        first = tmp_path / "a.s"
        second = tmp_path / "b.s"
        assert run(capsys, "asm", "--disasm", src, "-o", first)[0] == EXIT_OK
        assert run(capsys, "asm", "--disasm", first, "-o", second)[0] == EXIT_OK
        assert first.read_text() == second.read_text()


class TestRun:
    def test_json_report(self, capsys):
        code, out, _ = run(capsys, "run", PROGRAMS / "dotp_lockstep.s", "--json", "-")
        assert code == EXIT_OK
        rep = json.loads(out)
        assert rep["status"] == "ok"
        for key in ("cycles", "instructions_retired", "per_core", "tcdm", "vlem", "energy",
                    "macs", "macs_per_cycle", "config", "energy_params", "input"):
            assert key in rep
        assert len(rep["per_core"]) == 16
        assert rep["vlem"]["entries"] == 1 and rep["tcdm"]["broadcasts"] >= 1
        assert rep["macs"] == 16 * 8
        assert rep["energy"]["total_pJ"] == pytest.approx(sum(rep["energy"]["by_unit"].values()))

    def test_json_is_deterministic(self, capsys, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run(capsys, "run", PROGRAMS / "dotp_lockstep.s", "--json", a)
        run(capsys, "run", PROGRAMS / "dotp_lockstep.s", "--json", b)
        assert a.read_bytes() == b.read_bytes()

    def test_divergence_exit_codes(self, capsys):
        code, _, err = run(capsys, "run", PROGRAMS / "divergent.s")
        assert code == EXIT_TRAP and "diverg" in err.lower()
        code, _, _ = run(capsys, "run", PROGRAMS / "divergent.s", "--permissive-divergence")
        assert code == EXIT_OK

    def test_strict_and_permissive_exclusive(self, capsys):
        with pytest.raises(SystemExit):
            main(["run", str(PROGRAMS / "divergent.s"), "--permissive-divergence",
                  "--mode-strict-divergence"])

    def test_energy_params_file(self, capsys, tmp_path):
        f = tmp_path / "zero.params"
        f.write_text("")
        code, out, _ = run(capsys, "run", PROGRAMS / "dotp_lockstep.s", "--energy-params", f,
                           "--json", "-")
        assert code == EXIT_OK and json.loads(out)["energy"]["total_pJ"] == 0

    def test_bad_config(self, capsys, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("no_such_key=1\n")
        code, _, err = run(capsys, "run", PROGRAMS / "dotp_lockstep.s", "--config", f)
        assert code == EXIT_INPUT and "no_such_key" in err

    def test_timeout_is_trap(self, capsys, tmp_path):
        f = tmp_path / "spin.s"
        f.write_text("loop: j loop\n")
        code, _, _ = run(capsys, "run", f, "--max-cycles", 100)
        assert code == EXIT_TRAP


@pytest.fixture(scope="module")
def smoke_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "smoke.csv"
    code = main(["bench", "--suite", str(SMOKE), "--csv", str(out)])
    return code, csv_rows(out.read_text())


class TestBench:
    def test_smoke_rows(self, smoke_csv):
        code, rows = smoke_csv
        assert code == EXIT_OK
        assert [r["kind"] for r in rows] == ["conv", "conv", "conv", "vecadd"]
        assert all(r["verified"] == "True" and r["failure"] == "" for r in rows)
        assert int(rows[0]["cycles"]) > 0 and int(rows[0]["macs"]) == 4 * 8 * 8 * 144

    def test_empty_suite(self, capsys, tmp_path):
        f = tmp_path / "empty.suite"
        f.write_text("# nothing here\n")
        code, _, err = run(capsys, "bench", "--suite", f)
        assert code == EXIT_INPUT and "usage" in err.lower()

    def test_unknown_suite_key(self, capsys, tmp_path):
        f = tmp_path / "bad.suite"
        f.write_text("kind=conv\nflavour=sweet\n")
        assert run(capsys, "bench", "--suite", f)[0] == EXIT_INPUT

    def test_json_output(self, capsys, tmp_path):
        f = tmp_path / "one.suite"
        f.write_text("kind=vecadd\nn=256\nchunk=1\ns=4\n")
        code, out, _ = run(capsys, "bench", "--suite", f, "--json", "-")
        (row,) = json.loads(out)["rows"]
        assert code == EXIT_OK and row["kind"] == "vecadd" and row["verified"] is True


class TestSweep:
    def test_savings_monotone_in_fetch_cost(self, capsys):
        code, out, _ = run(capsys, "sweep", "--grid", "if_stage_active=0.5,1.0,2.0")
        assert code == EXIT_OK
        rows = [r for r in csv_rows(out) if r["mode"] == "VLEM"]
        savings = [float(r["vlem_savings_pct"]) for r in rows]
        assert len(savings) == 3 and savings == sorted(savings) and savings[0] < savings[-1]
        # energy-only points reuse one simulation
        assert len({r["cycles"] for r in rows}) == 1

    def test_single_point_matches_bench(self, capsys, smoke_csv):
        default = EnergyParams.default().idex_active
        code, out, _ = run(capsys, "sweep", "--suite", SMOKE, "--grid", f"idex_active={default}")
        assert code == EXIT_OK
        swept = csv_rows(out)
        _, benched = smoke_csv
        for s, b in zip(swept, benched, strict=True):
            assert s["cycles"] == b["cycles"]
            assert float(s["energy_pJ"]) == pytest.approx(float(b["energy_pJ"]))

    @pytest.mark.parametrize("grid", ["idex_active", "nonsense=1,2", "idex_active=",
                                      "idex_active=abc", "n_banks=zz"])
    def test_malformed_grid(self, capsys, grid):
        code, _, err = run(capsys, "sweep", "--grid", grid)
        assert code == EXIT_INPUT and err

    def test_config_grid_resimulates(self, capsys, tmp_path):
        f = tmp_path / "one.suite"
        f.write_text("kind=conv\nH=4\nW=8\nC_in=16\nC_out=8\npad=1\nmode=VLEM\n")
        code, out, _ = run(capsys, "sweep", "--suite", f, "--grid", "broadcast=true,false")
        on, off = csv_rows(out)
        assert code == EXIT_OK
        assert int(on["broadcasts"]) > 0 and int(off["broadcasts"]) == 0
        assert int(off["cycles"]) > int(on["cycles"])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "0.1.0" in capsys.readouterr().out
