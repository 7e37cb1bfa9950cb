import json
import subprocess
import sys

import pytest

from lindispatch.cli import main
from lindispatch.fixtures import data_path

from conftest import diag_block, two_bus_doc


@pytest.fixture
def cyclic(tmp_path):
    doc = two_bus_doc()
    doc["buses"].append({"id": "n2", "phases": "a"})
    doc["lines"] += [
        {"from": "n1", "to": "n2", "r": diag_block(0.01), "x": diag_block(0.01)},
        {"from": "n2", "to": "s", "r": diag_block(0.01), "x": diag_block(0.01)},
    ]
    path = tmp_path / "cyclic.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_validate(capsys, cyclic, tmp_path):
    assert main(["validate", "fixture13"]) == 0
    assert "32 phase-nodes" in capsys.readouterr().out
    assert main(["validate", str(data_path("fixture2"))]) == 0
    assert main(["validate", cyclic]) == 1
    assert "non-radial" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_assemble(tmp_path, capsys, cyclic):
    out = tmp_path / "sys.json"
    assert main(["assemble", "fixture2", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["N"] == 1 and "A_sys" in doc["matrices"]
    assert "N=1" in capsys.readouterr().out
    assert main(["assemble", cyclic]) == 1


def test_dispatch_outputs(tmp_path, capsys):
    out = tmp_path / "d.json"
    assert main(["dispatch", "fixture13", "--scenario", "vv", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["status"] == "optimal" and len(doc["commands"]) == 19
    assert "solve_time_s" not in doc
    text = capsys.readouterr().out
    assert "scenario vv: optimal" in text
    csv_out = tmp_path / "d.csv"
    assert main(["dispatch", "fixture13", "--out", str(csv_out), "--format", "csv"]) == 0
    assert csv_out.read_text().splitlines()[0] == "der,mode,q,v_set"


def test_dispatch_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["dispatch", "fixture13", "--scenario", "mixed", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_dispatch_mode_maps(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"der671a": "PV", "der675b": "VV"}))
    assert main(["dispatch", "fixture13", "--scenario", f"map={good}"]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"der999z": "PV"}))
    assert main(["dispatch", "fixture13", "--scenario", f"map={bad}"]) == 1
    assert "der999z" in capsys.readouterr().err
    assert main(["dispatch", "fixture13", "--scenario", f"map={tmp_path / 'nope.json'}"]) == 1


def test_dispatch_infeasible_band(capsys):
    assert main(["dispatch", "fixture13", "--v-band", "1.1", "1.2"]) == 3
    assert "voltage-band" in capsys.readouterr().err


def test_bench_check(tmp_path, capsys):
    out = tmp_path / "bench.json"
    nodes = tmp_path / "nodes.csv"
    assert main(["bench", "fixture13", "--check", "--out", str(out), "--csv", str(nodes)]) == 0
    assert "acceptance checks passed" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert [s["scenario"] for s in doc["scenarios"]] == ["pq", "pv", "vv", "mixed"]
    assert nodes.read_text().startswith("scenario,node,abs_voltage_error_pu")


def test_bench_single_scenario(capsys):
    assert main(["bench", "fixture2", "--scenario", "pq"]) == 0
    assert main(["bench", "fixture2", "--scenario", "bogus"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lindispatch", "validate", "fixture2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
