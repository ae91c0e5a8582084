import json
import subprocess
import sys

import jsonschema
import pytest

from gridstrike import reports
from gridstrike.case_io import CanonicalCaseDocument, load_case, write_json
from gridstrike.cli import main


def _validate(path, schema):
    doc = json.loads(path.read_text())
    jsonschema.validate(doc, reports.load_schema(schema))
    return doc


def test_pf_outputs(tmp_path, capsys):
    assert main(["pf", "case118", "--out", str(tmp_path), "--attack", "71:3,74:3,82:3"]) == 0
    doc = _validate(tmp_path / "powerflow.json", "powerflow")
    assert doc["status"] == "Converged"
    assert doc["attack"] == {"71": 3.0, "74": 3.0, "82": 3.0}
    assert (tmp_path / "pf_trace.csv").read_text().startswith("iteration,residual_inf\n")
    rows = (tmp_path / "voltage_profile.csv").read_text().splitlines()
    assert rows[0] == "bus,V_base,V_attacked" and len(rows) == 119
    assert "Converged" in capsys.readouterr().out


def test_voltage_attack_and_compare(tmp_path):
    assert main(["attack", "--model", "voltage", "--case", "case118", "--kappa", "3",
                 "--compare", "--out", str(tmp_path)]) == 0
    doc = _validate(tmp_path / "attack.json", "attack")
    assert doc["comparison"]["agree"] is True
    assert {r["line"] for r in doc["table"] if r["BestK"] > 0} == {71, 74, 82}
    assert doc["config"]["v_limits"] == [0.93, 1.07]


def test_power_attack_with_given_targets(tmp_path):
    assert main(["attack", "case30", "--model", "power", "--kappa", "2", "--targets", "26",
                 "--out", str(tmp_path)]) == 0
    doc = _validate(tmp_path / "attack.json", "attack")
    assert doc["objective_units"] == "MW"
    assert doc["columns"]["BestK"]["objective"] >= doc["columns"]["TopK"]["objective"] - 1e-9
    assert "screening" not in doc


def test_screen_outputs(tmp_path):
    assert main(["screen", "case30", "--out", str(tmp_path)]) == 0
    doc = _validate(tmp_path / "screening.json", "screening")
    assert doc["vulnerable_lines"] == [10, 34]


def test_reproducible_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["attack", "case30", "--kappa", "4", "--seed", "7", "--out", str(d)]) == 0
    assert (a / "attack.json").read_bytes() == (b / "attack.json").read_bytes()
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


def test_certificate_exit_code(tmp_path):
    from conftest import TWO_BUS
    case = tmp_path / "twobus.m"
    case.write_text(TWO_BUS)
    assert main(["attack", str(case), "--kappa", "1", "--gamma-bar", "200",
                 "--out", str(tmp_path)]) == 5
    doc = _validate(tmp_path / "attack.json", "attack")
    assert doc["certificate"] is True


def test_missing_file(tmp_path, capsys):
    assert main(["pf", str(tmp_path / "nope.m"), "--out", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err)
    jsonschema.validate(err, reports.load_schema("error"))
    assert err["error"] == "FileNotFoundError"


def test_malformed_case(tmp_path, capsys):
    from conftest import TWO_BUS
    case = tmp_path / "bad.m"
    case.write_text(TWO_BUS.replace("0.01	0.1", "0.01	x"))
    assert main(["pf", str(case), "--out", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["details"]["line"] is not None


def test_usage_errors(tmp_path, capsys):
    assert main(["attack", "--model", "voltage"]) == 2
    assert main(["bogus"]) == 2
    assert main(["enumerate", "case118", "-k", "3", "--out", str(tmp_path)]) == 2
    assert main(["enumerate", "case30", "-k", "3", "--enable-enumeration", "--max-combos", "5",
                 "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = 3\n")
    assert main(["pf", "case30", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("kappa = 2\nv_limits = (0.9, 1.1)\nmodel = voltage\n")
    assert main(["attack", "case30", "--config", str(cfg), "--kappa", "1",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "attack.json").read_text())
    assert doc["config"]["kappa"] == 1.0
    assert doc["config"]["v_limits"] == [0.9, 1.1]


def test_enumerate_small(tmp_path):
    case = tmp_path / "c.json"
    case.write_text(write_json(CanonicalCaseDocument(load_case("case30"))))
    assert main(["enumerate", str(case), "-k", "1", "--enable-enumeration", "--top", "3",
                 "--v-limits", "0.93,1.07", "--out", str(tmp_path)]) == 0
    doc = _validate(tmp_path / "enumeration.json", "enumeration")
    assert doc["combinations"] == 41 and len(doc["top"]) == 3


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gridstrike.cli", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "gridstrike" in r.stdout
