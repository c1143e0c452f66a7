from __future__ import annotations

import json
import math

import pytest

from gridvvo.cases import bundled_case
from gridvvo.cli import RunSpec, _parse_lambda, main

CASE4 = bundled_case("case4_vvo")
SMALL = ["--lambda-p", "1,inf", "--tap-dev", "1", "--cb-max", "2"]


def _run(tmp_path, *extra, name="report.csv"):
    out = tmp_path / name
    code = main(["run", "--case", str(CASE4), "--output", str(out), *extra])
    return code, out


def test_run_writes_report(tmp_path):
    code, out = _run(tmp_path, *SMALL, "--format", "csv")
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 1 + 2
    assert lines[1].split(",")[1] == "--"
    assert not list(tmp_path.glob(".*.tmp"))


def test_run_with_enumeration(tmp_path):
    code, out = _run(tmp_path, "--lambda-p", "1", "--tap-dev", "1", "--cb-max", "2", "--enumerate",
                     "--format", "json", name="r.json")
    assert code == 0
    rec = json.loads(out.read_text())["enumeration"][0]
    assert rec["combinations"] == 9
    assert abs(rec["pipeline_objective"] - rec["oracle_same_assignment"]) <= 1e-6 * abs(rec["oracle_same_assignment"])
    assert rec["ratio_to_best"] <= 1.05


def test_enumeration_limit_reported(tmp_path, capsys):
    code = main(["run", "--case", str(CASE4), "--lambda-p", "1", "--tap-dev", "3", "--cb-max", "3",
                 "--enumerate", "--enumerate-limit", "5"])
    assert code == 0
    assert "exceed the limit of 5" in capsys.readouterr().out


def test_missing_case_exit_one(tmp_path, capsys):
    missing = tmp_path / "nope.m"
    code = main(["run", "--case", str(missing), "--output", str(tmp_path / "r.txt")])
    assert code == 1
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "r.txt").exists()


def test_infeasible_reference_writes_nothing(tmp_path):
    text = CASE4.read_text().replace("4	1	70	30", "4	1	700	30")
    case = tmp_path / "overload.m"
    case.write_text(text)
    out = tmp_path / "r.txt"
    code = main(["run", "--case", str(case), "--output", str(out), *SMALL])
    assert code == 1
    assert not out.exists()
    assert list(tmp_path.iterdir()) == [case]


@pytest.fixture(scope="module")
def saved_state(tmp_path_factory):
    d = tmp_path_factory.mktemp("states")
    assert main(["run", "--case", str(CASE4), "--lambda-p", "1", "--tap-dev", "1", "--cb-max", "2",
                 "--output", str(d / "r.txt"), "--save-states", str(d)]) == 0
    (path,) = d.glob("*_lp1_t1_c2.json")
    return path


def test_check_accepts_pipeline_output(saved_state, capsys):
    assert main(["check", "--case", str(CASE4), "--state", str(saved_state)]) == 0
    assert "max |kcl residual|" in capsys.readouterr().out


def test_check_flags_off_grid_tap(saved_state, tmp_path, capsys):
    doc = json.loads(saved_state.read_text())
    doc["state"]["tap"][0] += 0.001
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["check", "--case", str(CASE4), "--state", str(bad)]) == 2
    assert "FAIL branch 0: tap" in capsys.readouterr().out


def test_check_flags_voltage(saved_state, tmp_path, capsys):
    doc = json.loads(saved_state.read_text())["state"]
    doc["vm"][2] = 1.2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["check", "--case", str(CASE4), "--state", str(bad)]) == 2
    assert "FAIL bus 2: vm 1.200000" in capsys.readouterr().out


@pytest.mark.parametrize("content", ["not json", "[1, 2]", '{"vm": [1.0]}'])
def test_check_malformed_state(tmp_path, content):
    bad = tmp_path / "bad.json"
    bad.write_text(content)
    assert main(["check", "--case", str(CASE4), "--state", str(bad)]) == 1


def test_reports_are_deterministic_apart_from_timings(tmp_path):
    def strip(text):
        doc = json.loads(text)
        for row in doc["rows"]:
            row.pop("t_relax_s")
            row.pop("t_fixed_s")
        return doc

    _, a = _run(tmp_path, *SMALL, "--format", "json", name="a.json")
    _, b = _run(tmp_path, *SMALL, "--format", "json", name="b.json")
    assert strip(a.read_text()) == strip(b.read_text())


def test_parallel_cells_match_serial(tmp_path):
    def rows(path):
        return [{k: v for k, v in r.items() if not k.startswith("t_")} for r in json.loads(path.read_text())["rows"]]

    _, a = _run(tmp_path, *SMALL, "--format", "json", "--jobs", "1", name="a.json")
    _, b = _run(tmp_path, *SMALL, "--format", "json", "--jobs", "2", name="b.json")
    assert rows(a) == rows(b)


def test_default_grid_has_nine_cells(tmp_path):
    spec = RunSpec(case=CASE4)
    cells = [(s.label["lambda_p"], s.tap_dev_steps, s.cb_max_modules) for s in spec.scenarios()]
    assert len(cells) == 9
    assert {(t, c) for _, t, c in cells} == {(3, 2), (3, 3), (16, 3)}
    assert {lp for lp, _, _ in cells} == {"1", "5", "inf"}


def test_lambda_parsing():
    assert _parse_lambda("1,5,inf") == [1.0, 5.0, math.inf]
    with pytest.raises(Exception):
        _parse_lambda("-1")


def test_out_of_range_device_limit_rejected(capsys):
    assert main(["run", "--case", str(CASE4), "--tap-dev", "20"]) == 1
    assert "tap_dev_steps" in capsys.readouterr().err
