import csv
import json

import pytest

from fftcs.cli import main, solution_from_dict
from fftcs.config import bundled_config


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    rc = main(["solve", "--config", "eta1", "--out", str(out), "--quiet"])
    return rc, out


def test_solve_writes_all_outputs(solved):
    rc, out = solved
    assert rc == 0
    doc = json.loads((out / "solution.json").read_text())
    assert doc["converged"] and doc["mode"] == "full"
    assert abs(doc["t_f"] - 1.22) <= 0.05 * 1.22
    lines = (out / "iterations.jsonl").read_text().splitlines()
    assert len(lines) == doc["iterations"]
    assert json.loads(lines[-1])["iteration"] == doc["iterations"] - 1
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 31 and float(rows[-1]["t_phys"]) == pytest.approx(doc["t_f"])
    with open(out / "controls.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30 and set(rows[0]) >= {"sigma", "v_0", "K_00", "K_01"}
    sol = solution_from_dict(doc)
    assert sol.final_time([1 / 30] * 30) == pytest.approx(doc["t_f"])


def test_rerun_is_byte_identical(solved, tmp_path):
    _, first = solved
    assert main(["solve", "--config", "eta1", "--out", str(tmp_path), "--quiet"]) == 0
    for name in ("solution.json", "trajectory.csv", "controls.csv"):
        assert (tmp_path / name).read_bytes() == (first / name).read_bytes(), name

    def strip(path):
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in recs]
    assert strip(tmp_path / "iterations.jsonl") == strip(first / "iterations.jsonl")


def test_validate_stored_solution(solved, tmp_path):
    _, out = solved
    argv = ["validate", "--solution", str(out / "solution.json"), "--config", "eta1", "--quiet"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    rep = (tmp_path / "a" / "mc_report.json").read_bytes()
    assert rep == (tmp_path / "b" / "mc_report.json").read_bytes()
    doc = json.loads(rep)
    assert doc["n_rollouts"] == 1000 and doc["seed"] == 0 and doc["mode"] == "full"
    assert (tmp_path / "a" / "mc_std.csv").exists()
    assert main(argv + ["--out", str(tmp_path / "c"), "--seed", "7"]) == 0
    assert json.loads((tmp_path / "c" / "mc_report.json").read_text())["seed"] == 7


def test_out_of_range_config_exits_1(tmp_path, capsys):
    doc = bundled_config("eta1")
    doc["constraints"]["Delta_u"] = 0.6
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "constraints.Delta_u" in err and "(0, 0.5]" in err


def test_unknown_key_exits_1(tmp_path, capsys):
    doc = bundled_config("eta1")
    doc["scp"]["tr_0"] = 0.1
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "scp.tr_0" in capsys.readouterr().err


def test_missing_config_and_bad_eta(tmp_path, capsys):
    assert main(["solve", "--config", "nope.json", "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--eta", "1,x", "--out", str(tmp_path)]) == 1
    assert main(["validate", "--config", "eta1"]) == 1
    err = capsys.readouterr().err
    assert "config not found" in err and "--eta" in err and "--solution" in err


def test_frozen_mode_on_multiplicative_config(tmp_path):
    rc = main(["solve", "--config", "multiplicative", "--mode", "frozen", "--out", str(tmp_path), "--quiet"])
    doc = json.loads((tmp_path / "solution.json").read_text())
    assert doc["mode"] == "frozen"
    assert rc == 0
