import json

import pytest

from aqflow.caseio import (
    ParseError, PerturbationSpec, apply_perturbation, load_json, parse_matpower, save_json,
)
from aqflow.netmodel import BusKind, CaseError

from .conftest import CASES, case_path

MINI = """function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
  10 3 0 0 0 0 1 1.02 0 345 1 1.1 0.9;
  20 1 40 10 0 0 1 1 0 345 1 1.1 0.9;
];
mpc.gen = [
  10 0 0 300 -300 1.02 100 1 250 10 0 0 0 0 0 0 0 0 0 0 0;
];
mpc.branch = [
  10 20 0.01 0.1 0.02 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.11 5 150;
];
"""


@pytest.mark.parametrize("name", CASES)
def test_fixtures_parse(load, name):
    case = load(name)
    assert case.n > 0 and case.buses[case.slack].kind is BusKind.SLACK


def test_parse_reindexes_external_ids():
    case = parse_matpower(MINI)
    assert case.name == "mini"
    assert [b.ext_id for b in case.buses] == [10, 20]
    assert case.branches[0].from_bus == 0 and case.branches[0].to_bus == 1
    assert case.generators[0].cost_coeffs == (0.11, 5.0, 150.0)
    assert case.buses[0].v_set == 1.02


def test_missing_gencost_defaults_linear():
    text = MINI.split("mpc.gencost")[0]
    g = parse_matpower(text).generators[0]
    assert g.cost_defaulted and g.cost_coeffs == (0.0, 1.0, 0.0)


def test_parse_errors_report_lines():
    with pytest.raises(ParseError, match="mpc.branch"):
        parse_matpower(MINI.replace("mpc.branch = [", "mpc.notbranch = ["))
    bad = MINI.replace("20 1 40 10", "20 1 4x0 10")
    with pytest.raises(ParseError) as exc:
        parse_matpower(bad)
    assert exc.value.line == 6


def test_unsupported_cost_model():
    with pytest.raises(ParseError, match="cost model"):
        parse_matpower(MINI.replace("2 0 0 3 0.11", "1 0 0 3 0.11"))


def test_unresolved_branch_endpoint():
    with pytest.raises(CaseError, match="does not resolve"):
        parse_matpower(MINI.replace("10 20 0.01", "10 30 0.01"))


@pytest.mark.parametrize("name", CASES)
def test_json_roundtrip(load, name):
    case = load(name)
    assert load_json(save_json(case)) == case


def test_json_errors_carry_path(load):
    doc = json.loads(save_json(load("case5")))
    doc["buses"][2]["p_demand"] = "lots"
    with pytest.raises(ParseError, match=r"\$\.buses\[2\]\.p_demand"):
        load_json(json.dumps(doc))
    doc = json.loads(save_json(load("case5")))
    doc["schema"] = "other"
    with pytest.raises(ParseError, match="schema"):
        load_json(json.dumps(doc))


def test_load_scaling(load):
    case = load("case9")
    out = apply_perturbation(case, PerturbationSpec("load", 2.0))
    for a, b in zip(case.buses, out.buses):
        assert b.p_demand == pytest.approx(2 * a.p_demand)
    with pytest.raises(CaseError, match="slack"):
        apply_perturbation(case, PerturbationSpec("load", 2.0, buses=[case.slack]))
    with pytest.raises(ValueError):
        apply_perturbation(case, PerturbationSpec("load", 0.0))


def test_rx_scaling_with_floor(load):
    case = load("case9")
    out = apply_perturbation(case, PerturbationSpec("rx", 3.0, branches=[0], r_floor=0.01))
    assert out.branches[0].r == pytest.approx(max(case.branches[0].r, 0.01) * 3)
    assert out.branches[1:] == case.branches[1:]
    assert out.branches[0].x == case.branches[0].x
