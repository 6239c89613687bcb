import itertools
import json

import numpy as np
import pytest

from aqflow.aqpf import (
    PV_AS_PQ, PV_MAGNITUDE, AqpfOptions, IncrementEncoding, MismatchModel, StepBounds, build_pf_hamiltonian,
    decode, initial_state, numeric_mismatch, partition_select, run_aqpf, scheduled_step, update_deltas,
    variable_counts,
)
from aqflow.netmodel import VoltageState, build_admittance
from aqflow.nrsolver import solve_nr

from .small_cases import three_bus, two_bus


def all_bits(n):
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)


def random_state(case, rng):
    n = case.n
    mu = 1 + 0.03 * rng.standard_normal(n)
    om = 0.05 * rng.standard_normal(n)
    mu[case.slack], om[case.slack] = case.buses[case.slack].v_set, 0.0
    return VoltageState(mu, om, rng.uniform(1e-3, 4e-2, n), rng.uniform(1e-4, 2e-2, n))


@pytest.mark.parametrize("make", [two_bus, three_bus])
@pytest.mark.parametrize("pv_mode", [PV_MAGNITUDE, PV_AS_PQ])
def test_symbolic_matches_numeric(make, pv_mode):
    case = make()
    Y = build_admittance(case)
    enc = IncrementEncoding.for_case(case)
    model = MismatchModel.for_pf(case, Y, pv_mode)
    state = random_state(case, np.random.default_rng(1))
    H = build_pf_hamiltonian(case, state, Y=Y, enc=enc, model=model)
    X = all_bits(enc.num_vars)
    sym = H.evaluate_many(X)
    num = np.array([numeric_mismatch(model, Y, decode(enc, state, x)).sum_squares for x in X])
    assert np.allclose(sym, num, rtol=1e-9, atol=1e-9 * num.max())
    assert H.degree == 4


def test_constant_term_is_base_mismatch():
    case = three_bus()
    Y = build_admittance(case)
    state = random_state(case, np.random.default_rng(2))
    H = build_pf_hamiltonian(case, state, Y=Y)
    model = MismatchModel.for_pf(case, Y)
    assert H.offset == pytest.approx(numeric_mismatch(model, Y, state).sum_squares)


def test_partition_drops_rows():
    case = three_bus()
    Y = build_admittance(case)
    state = random_state(case, np.random.default_rng(3))
    full = build_pf_hamiltonian(case, state, Y=Y)
    part = build_pf_hamiltonian(case, state, Y=Y, partition_excluded={2})
    model = MismatchModel.for_pf(case, Y).restricted({2})
    assert part.offset == pytest.approx(numeric_mismatch(model, Y, state).sum_squares)
    assert part.offset < full.offset
    with pytest.raises(ValueError):
        build_pf_hamiltonian(case, state, Y=Y, partition_excluded={case.slack})


def test_encoding_layout():
    enc = IncrementEncoding.for_case(three_bus())
    assert enc.num_vars == 8
    assert enc.index(2, "mu", 0) == 4 and enc.index(2, "omega", 1) == 7
    dm, do = enc.moves([1, 0, 0, 1, 1, 1, 0, 0])
    assert dm.tolist() == [1, 0] and do.tolist() == [-1, 0]


def test_decode_moves_by_steps():
    case = two_bus()
    enc = IncrementEncoding.for_case(case)
    s = VoltageState([1.02, 1.0], [0.0, 0.0], [0.0, 0.01], [0.0, 0.002])
    out = decode(enc, s, [0, 1, 1, 0])
    assert out.mu[1] == pytest.approx(0.99) and out.omega[1] == pytest.approx(0.002)
    assert out.mu[0] == 1.02


def test_schedule_endpoints():
    b = StepBounds()
    assert scheduled_step(*b.mu, b.rate, 0) == pytest.approx(4e-2)
    assert scheduled_step(*b.mu, b.rate, 10_000) == pytest.approx(5e-4)


def test_update_deltas_rules():
    case = two_bus()
    enc = IncrementEncoding.for_case(case)
    d = np.zeros(2)
    base = scheduled_step(5e-4, 4e-2, -0.05, 3)
    # fewer than three vectors: schedule only
    dm, _ = update_deltas([np.zeros(4)], d, d, 3, enc)
    assert dm[1] == pytest.approx(base)
    # stagnation on mu (all zero), a single move on omega
    hist = [np.array([0, 0, 1, 0]), np.array([0, 0, 0, 0]), np.array([0, 0, 0, 0])]
    dm, do = update_deltas(hist, d, d, 3, enc)
    assert dm[1] == pytest.approx(base / 2)
    assert do[1] == pytest.approx(scheduled_step(1e-4, 2e-2, -0.05, 3))
    # oscillation pattern (oldest first): up, down, up
    hist = [np.array([1, 0, 0, 0]), np.array([0, 1, 0, 0]), np.array([1, 0, 0, 0])]
    dm, _ = update_deltas(hist, d, d, 3, enc)
    assert dm[1] == pytest.approx(base / 2)
    # halving never goes below the floor
    dm, _ = update_deltas([np.zeros(4)] * 3, d, d, 500, enc)
    assert dm[1] == pytest.approx(5e-4)


def test_partition_select_deterministic(load):
    case = load("case9")
    a = partition_select(case, 0.2, 7, 3)
    assert a == partition_select(case, 0.2, 7, 3)
    assert len(a) == 2 and case.slack not in a
    assert partition_select(case, 0.0, 7, 3) == frozenset()
    with pytest.raises(ValueError):
        partition_select(case, 1.0, 0, 0)


def test_variable_counts_base(load):
    for name in ("case9", "case14"):
        case = load(name)
        counts = variable_counts(case)
        assert counts["base"] == 4 * (case.n - 1)
        assert counts["total"] == counts["base"] + counts["auxiliary"]


def test_two_bus_converges_and_matches_nr():
    case = two_bus()
    tr = run_aqpf(case, AqpfOptions(it_max=150, seed=1))
    assert tr.converged and tr.residual <= 1e-2
    nr = solve_nr(case).v
    assert np.allclose(tr.state.magnitude, nr.magnitude, atol=5e-3)
    assert np.allclose(tr.state.angle_deg, nr.angle_deg, atol=0.5)
    res = tr.residuals
    assert all(b <= a for a, b in zip(res, res[1:]))


def test_trace_serialization():
    tr = run_aqpf(two_bus(), AqpfOptions(it_max=3))
    doc = json.loads(tr.to_json())
    assert doc["iterations"] == 3 and len(doc["records"]) == 3
    lines = tr.to_csv().split("\r\n")
    assert lines[0].startswith("case,solver,iter,residual")
    assert len([ln for ln in lines if ln]) == 4


def test_runs_are_reproducible():
    a = run_aqpf(three_bus(), AqpfOptions(it_max=5, seed=3))
    b = run_aqpf(three_bus(), AqpfOptions(it_max=5, seed=3))
    assert a.residuals == b.residuals
    assert np.array_equal(a.state.mu, b.state.mu)


def test_initial_state():
    case = three_bus()
    s = initial_state(case, AqpfOptions())
    assert s.mu.tolist() == [1.0, 1.0, 1.0] and s.d_mu[1] == 1e-2 and s.d_omega[2] == 1e-3
