import numpy as np
import pytest

from aqflow.caseio import PerturbationSpec, apply_perturbation
from aqflow.netmodel import build_admittance, compute_injections, specified_injections
from aqflow.nrsolver import NotConverged, NrOptions, solve_nr

from .conftest import CASES

# published case9 solution (degrees, p.u.)
CASE9_ANGLES = [0.0, 9.669, 4.771, -2.407, -4.017, 1.926, 0.622, 3.799, -4.350]
CASE9_VM = [1.0, 1.0, 1.0, 0.987, 0.975, 1.003, 0.986, 0.996, 0.958]


@pytest.mark.parametrize("name", CASES)
def test_converges_and_reproduces_specs(load, name):
    case = load(name)
    res = solve_nr(case)
    assert res.converged and res.max_mismatch <= 1e-8
    p_spec, q_spec = specified_injections(case)
    ns = case.non_slack
    assert np.allclose(res.p[ns], p_spec[ns], atol=1e-5)
    pq = [b.id for b in case.buses if b.kind.value == "pq"]
    assert np.allclose(res.q[pq], q_spec[pq], atol=1e-5)
    for b in case.buses:
        if b.kind.value != "pq":
            assert res.v.magnitude[b.id] == pytest.approx(b.v_set, abs=1e-8)


def test_case9_known_solution(load):
    res = solve_nr(load("case9"))
    assert np.allclose(res.v.angle_deg, CASE9_ANGLES, atol=2e-3)
    assert np.allclose(res.v.magnitude, CASE9_VM, atol=1e-3)
    Y = build_admittance(load("case9"))
    p, _ = compute_injections(Y, res.v)
    assert p[0] == pytest.approx(71.95, abs=0.01)


def test_quadratic_convergence(load):
    res = solve_nr(load("case14"))
    h = res.history
    assert res.iterations <= 6
    assert h[-1] < h[-2] ** 1.5


def test_not_converged_raises(load):
    stressed = apply_perturbation(load("case9"), PerturbationSpec("load", 5.0))
    with pytest.raises(NotConverged) as exc:
        solve_nr(stressed)
    assert not exc.value.result.converged
    res = solve_nr(stressed, strict=False)
    assert not res.converged and res.message


def test_options_validated():
    with pytest.raises(ValueError):
        NrOptions(tol=0)
    with pytest.raises(ValueError):
        NrOptions(max_iter=0)
