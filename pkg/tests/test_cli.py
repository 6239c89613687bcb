import csv
import json
from dataclasses import replace

import pytest

from aqflow.caseio import load_case, save_json
from aqflow.cli import REPORT_SCHEMA, main, mse_against

from .conftest import case_path
from .small_cases import three_bus, two_bus


@pytest.fixture
def two_bus_file(tmp_path):
    path = tmp_path / "two.json"
    path.write_text(save_json(two_bus()))
    return str(path)


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_pf_nr_report(tmp_path):
    out = tmp_path / "nr.json"
    assert main(["pf", case_path("case9"), "--solver", "nr", "--out", str(out)]) == 0
    rep = read_json(out)
    assert rep["schema"] == REPORT_SCHEMA and rep["converged"] and rep["residual"] <= 1e-8
    assert len(rep["buses"]) == 9 and "mse" not in rep
    assert {"v", "angle_deg", "p_mw", "q_mvar"} <= set(rep["buses"][0])


def test_pf_aqpf_with_reference(tmp_path, two_bus_file):
    ref = tmp_path / "ref.json"
    assert main(["pf", two_bus_file, "--solver", "nr", "--out", str(ref)]) == 0
    out = tmp_path / "aq.json"
    code = main(["--seed", "1", "pf", two_bus_file, "--solver", "aqpf", "--max-iter", "150",
                 "--reference", str(ref), "--out", str(out)])
    rep = read_json(out)
    assert code == 0 and rep["converged"] and rep["residual"] <= 1e-2
    assert set(rep["mse"]) == {"p_mw2", "q_mvar2", "v_pu2", "angle_deg2"}
    assert rep["config"]["seed"] == 1
    assert (tmp_path / "aq.trace.csv").exists()
    assert (tmp_path / "aq.residual.png").stat().st_size > 0
    assert (tmp_path / "aq.buses.png").exists()
    with open(tmp_path / "aq.trace.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["case", "solver", "iter", "residual"]
    assert len(rows) == rep["iterations"] + 1


def test_not_converged_exit_code_and_report(tmp_path, two_bus_file):
    out = tmp_path / "short.json"
    code = main(["pf", two_bus_file, "--solver", "aqpf", "--max-iter", "2", "--no-plots", "--out", str(out)])
    assert code == 1
    assert read_json(out)["converged"] is False


def test_bad_input_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\n")
    assert main(["pf", str(bad), "--solver", "nr"]) == 2
    assert "mpc.bus" in capsys.readouterr().err
    assert main(["pf", str(tmp_path / "missing.m"), "--solver", "nr"]) == 2


def test_opf_infeasible_exit_code(tmp_path, capsys):
    case = three_bus()
    small = tuple(replace(g, p_min=0.0, p_max=5.0) for g in case.generators)
    path = tmp_path / "infeasible.json"
    path.write_text(save_json(replace(case, generators=small)))
    assert main(["opf", str(path)]) == 1
    assert "demand" in capsys.readouterr().err


def test_perturb_factor_one_is_identity(tmp_path):
    out = tmp_path / "p.json"
    assert main(["perturb", case_path("case9"), "--mode", "load", "--factor", "1", "--out", str(out)]) == 0
    case = load_case(str(out))
    assert case.name.startswith("case9_")
    assert case.with_name("case9") == load_case(case_path("case9"))


def test_perturb_rx(tmp_path):
    out = tmp_path / "rx.json"
    assert main(["perturb", case_path("case9"), "--mode", "rx", "--factor", "5", "--branches", "0,2",
                 "--out", str(out)]) == 0
    new, old = load_case(str(out)), load_case(case_path("case9"))
    assert new.branches[1] == old.branches[1]
    assert new.branches[2].r == pytest.approx(5 * old.branches[2].r)


def test_bench_outputs(tmp_path):
    d = tmp_path / "bench"
    code = main(["bench", case_path("case9"), case_path("case14"), "--solvers", "nr", "--out-dir", str(d)])
    assert code == 0
    with open(d / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["case"] for r in rows] == ["case9", "case14"]
    with open(d / "traces.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["case", "iter", "residual"]
    assert read_json(d / "summary.json")["rows"][0]["converged"] is True
    assert (d / "residuals.png").exists()


def test_bench_counts_and_determinism(tmp_path):
    runs = []
    for k in range(2):
        d = tmp_path / f"b{k}"
        main(["bench", case_path("case4gs"), case_path("case9"), "--solvers", "aqpf", "--max-iter", "3",
              "--no-plots", "--out-dir", str(d)])
        with open(d / "traces.csv", newline="") as fh:
            runs.append([r["residual"] for r in csv.DictReader(fh)])
        with open(d / "summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    assert runs[0] == runs[1]
    totals = [int(r["total"]) for r in rows]
    assert totals[0] < totals[1]
    assert int(rows[1]["base"]) == 32
    assert 0.8 * 249 <= totals[1] <= 1.2 * 249


def test_mse_requires_matching_buses():
    rep = {"buses": [{"id": 1, "kind": "pq", "p_mw": 1.0, "q_mvar": 0.0, "v": 1.0, "angle_deg": 0.0}]}
    ref = {"buses": [{"id": 1, "kind": "pq", "p_mw": 3.0, "q_mvar": 1.0, "v": 1.0, "angle_deg": 0.0}]}
    assert mse_against(rep, ref) == {"p_mw2": 4.0, "q_mvar2": 1.0, "v_pu2": 0.0, "angle_deg2": 0.0}
