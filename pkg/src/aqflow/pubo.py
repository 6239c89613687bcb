"""Multilinear binary polynomials, quadratization, QUBO/Ising models and an
exhaustive minimizer for small instances.

Monomials are sorted tuples of distinct variable indices; ``()`` is the
constant term. Products apply ``x**2 == x`` so every stored term is
multilinear.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

Monomial = tuple[int, ...]

MAX_BRUTE_FORCE_VARS = 24


class DegreeError(ValueError):
    pass


@lru_cache(maxsize=1 << 20)
def merge(a: Monomial, b: Monomial) -> Monomial:
    """Product of two monomials under idempotence."""
    if not a:
        return b
    if not b:
        return a
    if a == b:
        return a
    return tuple(sorted(set(a).union(b)))


def _normalize(m: Iterable[int]) -> Monomial:
    return tuple(sorted(set(int(i) for i in m)))


class BinaryPolynomial:
    """Real-coefficient multilinear polynomial over binary variables."""

    __slots__ = ("terms", "num_vars")

    def __init__(self, terms: Mapping[Iterable[int], float] | None = None, num_vars: int | None = None):
        acc: dict[Monomial, float] = {}
        for m, c in (terms or {}).items():
            key = _normalize(m)
            acc[key] = acc.get(key, 0.0) + float(c)
        self.terms = {m: c for m, c in acc.items() if c != 0.0}
        top = max((m[-1] + 1 for m in self.terms if m), default=0)
        self.num_vars = max(top, num_vars or 0)

    @classmethod
    def _raw(cls, terms: dict[Monomial, float], num_vars: int) -> "BinaryPolynomial":
        p = cls.__new__(cls)
        p.terms = {m: c for m, c in terms.items() if c != 0.0}
        p.num_vars = num_vars
        return p

    @classmethod
    def constant(cls, c: float, num_vars: int = 0) -> "BinaryPolynomial":
        return cls._raw({(): float(c)}, num_vars)

    @classmethod
    def variable(cls, i: int, coeff: float = 1.0) -> "BinaryPolynomial":
        return cls._raw({(i,): float(coeff)}, i + 1)

    @classmethod
    def affine(cls, const: float, linear: Mapping[int, float], num_vars: int = 0) -> "BinaryPolynomial":
        terms = {(i,): float(c) for i, c in linear.items()}
        terms[()] = terms.get((), 0.0) + float(const)
        top = max(list(linear) + [num_vars - 1], default=-1) + 1
        return cls._raw(terms, top)

    # -- algebra --------------------------------------------------------------

    def __add__(self, other) -> "BinaryPolynomial":
        if isinstance(other, (int, float)):
            other = BinaryPolynomial.constant(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return BinaryPolynomial._raw(out, max(self.num_vars, other.num_vars))

    __radd__ = __add__

    def __neg__(self) -> "BinaryPolynomial":
        return self.scale(-1.0)

    def __sub__(self, other) -> "BinaryPolynomial":
        if isinstance(other, (int, float)):
            return self + (-other)
        return self + other.scale(-1.0)

    def __rsub__(self, other) -> "BinaryPolynomial":
        return (-self) + other

    def scale(self, a: float) -> "BinaryPolynomial":
        return BinaryPolynomial._raw({m: a * c for m, c in self.terms.items()}, self.num_vars)

    def __mul__(self, other) -> "BinaryPolynomial":
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        out: dict[Monomial, float] = {}
        for ma, ca in self.terms.items():
            for mb, cb in other.terms.items():
                m = merge(ma, mb)
                out[m] = out.get(m, 0.0) + ca * cb
        return BinaryPolynomial._raw(out, max(self.num_vars, other.num_vars))

    __rmul__ = __mul__

    def square(self) -> "BinaryPolynomial":
        items = list(self.terms.items())
        out: dict[Monomial, float] = {}
        for k, (ma, ca) in enumerate(items):
            out[ma] = out.get(ma, 0.0) + ca * ca
            two_ca = 2.0 * ca
            for mb, cb in items[k + 1:]:
                m = merge(ma, mb)
                out[m] = out.get(m, 0.0) + two_ca * cb
        return BinaryPolynomial._raw(out, self.num_vars)

    def add_inplace(self, other: "BinaryPolynomial", weight: float = 1.0) -> None:
        t = self.terms
        for m, c in other.terms.items():
            t[m] = t.get(m, 0.0) + weight * c
        self.num_vars = max(self.num_vars, other.num_vars)

    def pruned(self, atol: float = 0.0) -> "BinaryPolynomial":
        return BinaryPolynomial._raw({m: c for m, c in self.terms.items() if abs(c) > atol}, self.num_vars)

    # -- inspection -----------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((len(m) for m in self.terms), default=0)

    @property
    def offset(self) -> float:
        return self.terms.get((), 0.0)

    def variables(self) -> set[int]:
        return {i for m in self.terms for i in m}

    def coefficient(self, *vars: int) -> float:
        return self.terms.get(_normalize(vars), 0.0)

    def evaluate(self, bits: Sequence[int]) -> float:
        return float(sum(c for m, c in self.terms.items() if all(bits[i] for i in m)))

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        """Energies for each row of a 0/1 matrix ``X``."""
        X = np.asarray(X)
        out = np.zeros(X.shape[0])
        for m, c in self.terms.items():
            if not m:
                out += c
            else:
                out += c * np.all(X[:, list(m)] != 0, axis=1)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryPolynomial):
            return NotImplemented
        return self.terms == other.terms

    def __repr__(self) -> str:
        return f"BinaryPolynomial(deg={self.degree}, terms={len(self.terms)}, num_vars={self.num_vars})"


def poly_add(p: BinaryPolynomial, q: BinaryPolynomial) -> BinaryPolynomial:
    return p + q


def poly_mul(p: BinaryPolynomial, q: BinaryPolynomial) -> BinaryPolynomial:
    return p * q


def poly_scale(p: BinaryPolynomial, a: float) -> BinaryPolynomial:
    return p.scale(a)


# -- quadratic models ---------------------------------------------------------

@dataclass
class QuboModel:
    n: int
    linear: dict[int, float] = field(default_factory=dict)
    quadratic: dict[tuple[int, int], float] = field(default_factory=dict)
    offset: float = 0.0

    def __post_init__(self):
        lin: dict[int, float] = {}
        for i, c in self.linear.items():
            if c:
                lin[int(i)] = lin.get(int(i), 0.0) + float(c)
        quad: dict[tuple[int, int], float] = {}
        for (i, j), c in self.quadratic.items():
            i, j = int(i), int(j)
            if i == j:
                lin[i] = lin.get(i, 0.0) + float(c)
                continue
            key = (i, j) if i < j else (j, i)
            quad[key] = quad.get(key, 0.0) + float(c)
        self.linear = {i: c for i, c in lin.items() if c != 0.0}
        self.quadratic = {k: c for k, c in quad.items() if c != 0.0}
        top = max([i + 1 for i in self.linear] + [j + 1 for _, j in self.quadratic], default=0)
        if top > self.n:
            raise ValueError(f"model references variable {top - 1} but n={self.n}")

    @classmethod
    def from_polynomial(cls, p: BinaryPolynomial, n: int | None = None) -> "QuboModel":
        if p.degree > 2:
            raise DegreeError(f"polynomial has degree {p.degree}; quadratize it first")
        lin, quad, off = {}, {}, 0.0
        for m, c in p.terms.items():
            if len(m) == 0:
                off = c
            elif len(m) == 1:
                lin[m[0]] = c
            else:
                quad[m] = c
        return cls(n=max(p.num_vars, n or 0), linear=lin, quadratic=quad, offset=off)

    def to_polynomial(self) -> BinaryPolynomial:
        terms: dict[Monomial, float] = {(i,): c for i, c in self.linear.items()}
        terms.update(self.quadratic)
        if self.offset:
            terms[()] = self.offset
        return BinaryPolynomial._raw(terms, self.n)

    def arrays(self):
        """``(lin, rows, cols, vals)`` with ``rows < cols``."""
        lin = np.zeros(self.n)
        for i, c in self.linear.items():
            lin[i] = c
        if self.quadratic:
            keys = np.array(list(self.quadratic.keys()), dtype=np.int64)
            vals = np.array(list(self.quadratic.values()), dtype=float)
        else:
            keys = np.zeros((0, 2), dtype=np.int64)
            vals = np.zeros(0)
        return lin, keys[:, 0], keys[:, 1], vals

    def energy(self, x: Sequence[int]) -> float:
        x = np.asarray(x)
        e = self.offset + sum(c for i, c in self.linear.items() if x[i])
        e += sum(c for (i, j), c in self.quadratic.items() if x[i] and x[j])
        return float(e)

    def energies(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lin, r, c, v = self.arrays()
        out = self.offset + X @ lin
        if v.size:
            out += (X[:, r] * X[:, c]) @ v
        return out

    def max_abs_coeff(self) -> float:
        vals = list(self.linear.values()) + list(self.quadratic.values())
        return max((abs(v) for v in vals), default=0.0)

    def to_coo_text(self) -> str:
        """Sparse coordinate export: ``# offset`` header then ``i j coeff`` lines."""
        lines = [f"# n {self.n}", f"# offset {self.offset!r}"]
        lines += [f"{i} {i} {c!r}" for i, c in sorted(self.linear.items())]
        lines += [f"{i} {j} {c!r}" for (i, j), c in sorted(self.quadratic.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_coo_text(cls, text: str) -> "QuboModel":
        n, offset, lin, quad = 0, 0.0, {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(" ")
                if key == "offset":
                    offset = float(val)
                elif key == "n":
                    n = int(val)
                continue
            i, j, c = line.split()
            i, j = int(i), int(j)
            if i == j:
                lin[i] = float(c)
            else:
                quad[(i, j)] = float(c)
            n = max(n, i + 1, j + 1)
        return cls(n=n, linear=lin, quadratic=quad, offset=offset)


@dataclass
class IsingModel:
    n: int
    h: dict[int, float] = field(default_factory=dict)
    j: dict[tuple[int, int], float] = field(default_factory=dict)
    offset: float = 0.0

    def energy(self, s: Sequence[int]) -> float:
        s = np.asarray(s)
        e = self.offset + sum(c * s[i] for i, c in self.h.items())
        e += sum(c * s[a] * s[b] for (a, b), c in self.j.items())
        return float(e)


def qubo_to_ising(q: QuboModel) -> IsingModel:
    """Substitute ``x = (1 + s) / 2``."""
    h: dict[int, float] = {}
    jj: dict[tuple[int, int], float] = {}
    off = q.offset
    for i, a in q.linear.items():
        h[i] = h.get(i, 0.0) + a / 2
        off += a / 2
    for (i, k), b in q.quadratic.items():
        jj[(i, k)] = jj.get((i, k), 0.0) + b / 4
        h[i] = h.get(i, 0.0) + b / 4
        h[k] = h.get(k, 0.0) + b / 4
        off += b / 4
    return IsingModel(n=q.n, h={i: c for i, c in h.items() if c != 0.0},
                      j={k: c for k, c in jj.items() if c != 0.0}, offset=off)


def ising_to_qubo(m: IsingModel) -> QuboModel:
    """Substitute ``s = 2x - 1``."""
    lin: dict[int, float] = {}
    quad: dict[tuple[int, int], float] = {}
    off = m.offset
    for i, a in m.h.items():
        lin[i] = lin.get(i, 0.0) + 2 * a
        off -= a
    for (i, k), b in m.j.items():
        quad[(i, k)] = quad.get((i, k), 0.0) + 4 * b
        lin[i] = lin.get(i, 0.0) - 2 * b
        lin[k] = lin.get(k, 0.0) - 2 * b
        off += b
    return QuboModel(n=m.n, linear=lin, quadratic=quad, offset=off)


# -- quadratization -----------------------------------------------------------

def pair_penalty(xi, xj, z):
    """Zero iff ``z == xi * xj``; at least one otherwise."""
    return xi * xj - 2 * (xi + xj) * z + 3 * z


@dataclass
class ReductionMap:
    num_original: int
    penalty_weight: float
    aux: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def num_aux(self) -> int:
        return len(self.aux)

    @property
    def num_total(self) -> int:
        return self.num_original + len(self.aux)


def _add(d: dict, key, val: float) -> None:
    d[key] = d.get(key, 0.0) + val


def quadratize(p: BinaryPolynomial, lam: float = 2.0, *, quartic_product: bool = True,
               num_vars: int | None = None) -> tuple[QuboModel, ReductionMap]:
    """Reduce a degree-4 polynomial to a QUBO with pairwise auxiliaries.

    Cubic ``c*xi*xj*xk`` becomes ``c*z*xk + |c|*lam*P(xi, xj; z)``; quartic
    ``c*xi*xj*xk*xl`` becomes ``c*z1*z2 + |c|*lam*(P1 + P2)``. One auxiliary is
    shared by every term reduced through the same pair. ``quartic_product=False``
    drops the ``z1*z2`` product, which does not preserve the minimum.
    """
    if not lam > 0:
        raise ValueError("penalty weight must be positive")
    if p.degree > 4:
        raise DegreeError(f"unsupported degree {p.degree} (at most 4)")
    n0 = max(p.num_vars, num_vars or 0)
    rmap = ReductionMap(num_original=n0, penalty_weight=lam)
    memo: dict[tuple[int, int], int] = {}
    lin: dict[int, float] = {}
    quad: dict[tuple[int, int], float] = {}
    offset = 0.0

    def aux_for(i: int, j: int) -> int:
        key = (i, j)
        z = memo.get(key)
        if z is None:
            z = n0 + len(memo)
            memo[key] = z
            rmap.aux[z] = key
        return z

    def penalize(i: int, j: int, z: int, w: float) -> None:
        _add(quad, (i, j), w)
        _add(quad, (i, z), -2 * w)
        _add(quad, (j, z), -2 * w)
        _add(lin, z, 3 * w)

    higher = []
    for m, c in p.terms.items():
        d = len(m)
        if d == 0:
            offset += c
        elif d == 1:
            _add(lin, m[0], c)
        elif d == 2:
            _add(quad, m, c)
        else:
            higher.append((m, c))
    higher.sort()

    for m, c in higher:
        w = abs(c) * lam
        if len(m) == 3:
            pairs = [((m[0], m[1]), m[2]), ((m[0], m[2]), m[1]), ((m[1], m[2]), m[0])]
            (i, j), k = next((pk for pk in pairs if pk[0] in memo), pairs[0])
            z = aux_for(i, j)
            _add(quad, (min(z, k), max(z, k)), c)
            penalize(i, j, z, w)
        else:
            a, b, cc, dd = m
            splits = [((a, b), (cc, dd)), ((a, cc), (b, dd)), ((a, dd), (b, cc))]
            best = max(splits, key=lambda s: (s[0] in memo) + (s[1] in memo))
            if (best[0] in memo) + (best[1] in memo) == 0:
                best = splits[0]
            (i, j), (k, l) = best
            z1 = aux_for(i, j)
            z2 = aux_for(k, l)
            if quartic_product:
                _add(quad, (z1, z2), c)
            penalize(i, j, z1, w)
            penalize(k, l, z2, w)

    return QuboModel(n=n0 + len(memo), linear=lin, quadratic=quad, offset=offset), rmap


@dataclass(frozen=True)
class Projection:
    bits: np.ndarray
    violations: int


def project_solution(bits: Sequence[int], rmap: ReductionMap) -> Projection:
    """Drop auxiliaries, counting (not repairing) those with ``z != xi*xj``."""
    bits = np.asarray(bits, dtype=np.int8)
    if bits.shape[0] < rmap.num_total:
        raise ValueError("assignment does not cover the auxiliary variables")
    bad = sum(int(bits[z]) != int(bits[i]) * int(bits[j]) for z, (i, j) in rmap.aux.items())
    return Projection(bits[:rmap.num_original].copy(), bad)


def repair_auxiliaries(bits: Sequence[int], rmap: ReductionMap) -> np.ndarray:
    """Set every auxiliary to the product of its parents."""
    out = np.array(bits, dtype=np.int8)
    for z in sorted(rmap.aux):
        i, j = rmap.aux[z]
        out[z] = out[i] & out[j]
    return out


# -- exhaustive minimization --------------------------------------------------

def _enumerate_block(n: int, start: int, stop: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts[None, :]) & 1).astype(np.int8)


def brute_force_min(model: QuboModel | BinaryPolynomial, n: int | None = None,
                    block: int = 1 << 16) -> tuple[np.ndarray, float]:
    """Exact global minimum; ties go to the lexicographically smallest bitstring."""
    if isinstance(model, QuboModel):
        n = max(model.n, n or 0)
        energies = model.energies
    else:
        n = max(model.num_vars, n or 0)
        energies = model.evaluate_many
    if n > MAX_BRUTE_FORCE_VARS:
        raise ValueError(f"{n} variables exceeds the brute-force limit of {MAX_BRUTE_FORCE_VARS}")
    if n == 0:
        return np.zeros(0, dtype=np.int8), float(energies(np.zeros((1, 0)))[0])
    best_e, best_x = math.inf, None
    total = 1 << n
    for start in range(0, total, block):
        X = _enumerate_block(n, start, min(total, start + block))
        E = energies(X)
        e_min = float(E.min())
        k = int(np.argmax(E <= e_min + 1e-12 * max(1.0, abs(e_min))))
        if E[k] < best_e - 1e-9 * max(1.0, abs(best_e) if math.isfinite(best_e) else 1.0):
            best_e, best_x = float(E[k]), X[k].copy()
    return best_x, best_e


def all_minimizers(model: QuboModel | BinaryPolynomial, n: int | None = None,
                   rtol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Every assignment within tolerance of the global minimum."""
    if isinstance(model, QuboModel):
        n = max(model.n, n or 0)
        energies = model.energies
    else:
        n = max(model.num_vars, n or 0)
        energies = model.evaluate_many
    if n > MAX_BRUTE_FORCE_VARS:
        raise ValueError(f"{n} variables exceeds the brute-force limit of {MAX_BRUTE_FORCE_VARS}")
    X = _enumerate_block(n, 0, 1 << n)
    E = energies(X)
    e0 = float(E.min())
    return X[E <= e0 + rtol * max(1.0, abs(e0))], e0
