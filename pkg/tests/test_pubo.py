import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqflow.pubo import (
    BinaryPolynomial, DegreeError, IsingModel, QuboModel, all_minimizers, brute_force_min,
    ising_to_qubo, pair_penalty, project_solution, quadratize, qubo_to_ising, repair_auxiliaries,
)


def random_poly(rng, n, degree=4, terms=12, integer=True):
    out = {}
    for _ in range(terms):
        d = int(rng.integers(0, degree + 1))
        m = tuple(sorted(rng.choice(n, size=min(d, n), replace=False).tolist()))
        c = int(rng.integers(-9, 10)) if integer else float(rng.normal(scale=3))
        out[m] = out.get(m, 0) + c
    return BinaryPolynomial(out, num_vars=n)


def all_bits(n):
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)


def test_algebra_matches_evaluation():
    rng = np.random.default_rng(0)
    X = all_bits(5)
    a, b = random_poly(rng, 5, 2, 6), random_poly(rng, 5, 2, 6)
    ea, eb = a.evaluate_many(X), b.evaluate_many(X)
    assert np.allclose((a + b).evaluate_many(X), ea + eb)
    assert np.allclose((a - b).evaluate_many(X), ea - eb)
    assert np.allclose((a * b).evaluate_many(X), ea * eb)
    assert np.allclose(a.square().evaluate_many(X), ea ** 2)
    assert np.allclose(a.scale(-2.5).evaluate_many(X), -2.5 * ea)


def test_idempotent_multiplication():
    x = BinaryPolynomial.variable(3)
    assert (x * x).terms == {(3,): 1.0}
    assert (x * x).degree == 1


def test_pair_penalty_truth_table():
    for xi, xj, z in itertools.product((0, 1), repeat=3):
        val = pair_penalty(xi, xj, z)
        assert (val == 0) == (z == xi * xj)
        assert val >= 0


def test_qubo_from_polynomial_rejects_cubic():
    p = BinaryPolynomial({(0, 1, 2): 1.0})
    with pytest.raises(DegreeError):
        QuboModel.from_polynomial(p)
    with pytest.raises(DegreeError):
        quadratize(BinaryPolynomial({(0, 1, 2, 3, 4): 1.0}))


def test_quadratize_memoizes_pairs():
    p = BinaryPolynomial({(0, 1, 2): 1.0, (0, 1, 3): -2.0, (0, 1, 2, 3): 3.0})
    q, rmap = quadratize(p)
    assert rmap.num_aux == 2
    assert set(rmap.aux.values()) == {(0, 1), (2, 3)}


@pytest.mark.parametrize("seed", range(20))
def test_quadratize_preserves_minimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 8))
    p = random_poly(rng, n, integer=bool(seed % 2))
    q, rmap = quadratize(p)
    _, e0 = brute_force_min(p, n)
    _, e1 = brute_force_min(q)
    assert e1 == pytest.approx(e0, abs=1e-9)
    X, _ = all_minimizers(q)
    orig_min, _ = all_minimizers(p, n)
    allowed = {tuple(r) for r in orig_min}
    for row in X:
        proj = project_solution(row, rmap)
        assert proj.violations == 0 and tuple(proj.bits) in allowed


def test_consistent_aux_reproduces_energy():
    rng = np.random.default_rng(7)
    p = random_poly(rng, 6, integer=False)
    q, rmap = quadratize(p)
    for x in all_bits(6):
        full = repair_auxiliaries(np.concatenate([x, np.zeros(rmap.num_aux, np.int8)]), rmap)
        assert q.energy(full) == pytest.approx(p.evaluate(x), abs=1e-9)


def test_dropping_product_term_can_break_minimum():
    # the quartic term alone is the only thing pulling x=1111 below zero
    p = BinaryPolynomial({(0, 1, 2, 3): -1.0})
    q, _ = quadratize(p, quartic_product=False)
    assert brute_force_min(q)[1] > brute_force_min(p)[1]


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 5), st.integers(0, 5)).map(lambda t: tuple(sorted(t))),
                       st.floats(-10, 10, allow_nan=False), max_size=12),
       st.floats(-5, 5, allow_nan=False))
def test_ising_roundtrip(terms, offset):
    q = QuboModel(n=6, quadratic=terms, offset=offset)
    ising = qubo_to_ising(q)
    back = ising_to_qubo(ising)
    X = all_bits(6)
    assert np.allclose(back.energies(X), q.energies(X), atol=1e-9)
    for x in X[::7]:
        assert ising.energy(2 * x.astype(int) - 1) == pytest.approx(q.energy(x), abs=1e-9)


def test_coo_text_roundtrip():
    q = QuboModel(n=4, linear={0: 1.5, 3: -2.0}, quadratic={(1, 2): 0.25}, offset=3.0)
    back = QuboModel.from_coo_text(q.to_coo_text())
    assert back == q


def test_brute_force_tie_break():
    p = BinaryPolynomial({(0,): 0.0, (1,): -1.0, (2,): -1.0, (1, 2): 1.0}, num_vars=3)
    x, e = brute_force_min(p)
    assert e == -1.0 and tuple(x) == (0, 0, 1)


def test_ising_energy_type():
    m = IsingModel(n=2, h={0: 1.0}, j={(0, 1): -1.0})
    assert m.energy([1, 1]) == 0.0
