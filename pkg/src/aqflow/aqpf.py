"""Power flow as iterated binary optimization over voltage increments.

Each non-slack bus carries four bits. With base point ``(mu0, omega0)`` and
steps ``(d_mu, d_omega)``::

    mu    = mu0    + d_mu    * (x_mu_up    - x_mu_down)
    omega = omega0 + d_omega * (x_omega_up - x_omega_down)

Substituting into the rectangular injection equations gives P and Q as
quadratic polynomials in the bits; the summed squared mismatch is quartic.
The outer loop quadratizes, anneals, moves the base point and adapts steps.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .annealer import AnnealConfig, MoveGroups, anneal, greedy_descent, tune_defaults
from .netmodel import (
    AdmittanceMatrix,
    BusKind,
    NetworkCase,
    VoltageState,
    build_admittance,
    compute_injections,
    specified_injections,
)
from .pubo import BinaryPolynomial, ReductionMap, project_solution, quadratize, repair_auxiliaries

log = logging.getLogger(__name__)

MU, OMEGA = "mu", "omega"
MAX_LEVEL = 12  # deepest remembered step halving
UP, DOWN = 0, 1


class StallError(RuntimeError):
    """No improving update for several consecutive iterations."""

    def __init__(self, message: str, trace: "SolveTrace"):
        super().__init__(message)
        self.trace = trace


# -- encoding -----------------------------------------------------------------

@dataclass(frozen=True)
class IncrementEncoding:
    buses: tuple[int, ...]  # encoded buses in variable order
    excluded: frozenset[int]  # buses with fixed voltage

    @classmethod
    def for_case(cls, case: NetworkCase) -> "IncrementEncoding":
        return cls(tuple(case.non_slack), frozenset([case.slack]))

    @property
    def num_vars(self) -> int:
        return 4 * len(self.buses)

    def position(self, bus: int) -> int:
        return self.buses.index(bus)

    def index(self, bus: int, part: str, bit: int) -> int:
        base = 4 * self.position(bus)
        return base + (0 if part == MU else 2) + bit

    @property
    def var_index(self) -> dict[tuple[int, str, int], int]:
        return {(b, part, bit): self.index(b, part, bit)
                for b in self.buses for part in (MU, OMEGA) for bit in (UP, DOWN)}

    def moves(self, bits: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Per encoded bus: ``x_up - x_down`` for mu and omega (values in {-1, 0, 1})."""
        x = np.asarray(bits[: self.num_vars], dtype=int).reshape(-1, 4)
        return x[:, 0] - x[:, 1], x[:, 2] - x[:, 3]


def decode(enc: IncrementEncoding, state: VoltageState, bits: Sequence[int]) -> VoltageState:
    """Apply the increment encoding to the base point of ``state``."""
    mu = state.mu.copy()
    om = state.omega.copy()
    dm, do = enc.moves(bits)
    idx = np.array(enc.buses, dtype=int)
    if idx.size:
        mu[idx] += state.d_mu[idx] * dm
        om[idx] += state.d_omega[idx] * do
    return VoltageState(mu, om, state.d_mu, state.d_omega)


# -- mismatch model -----------------------------------------------------------

PV_AS_PQ = "as-pq"
PV_MAGNITUDE = "magnitude"


@dataclass(frozen=True)
class MismatchModel:
    """Which equations are balanced at which bus, and their targets.

    ``p_rows``/``q_rows`` list buses with an active/reactive balance row.
    ``v_rows`` list PV buses whose reactive row is replaced by the magnitude
    equation, scaled to MVAR-equivalent units by ``v_weight``.
    """

    p_rows: tuple[int, ...]
    q_rows: tuple[int, ...]
    v_rows: tuple[int, ...]
    p_target: np.ndarray  # MW, net scheduled injection per bus
    q_target: np.ndarray  # MVAR
    v_target: np.ndarray  # p.u. magnitude per bus
    v_weight: np.ndarray  # MVAR per p.u.^2

    @classmethod
    def for_pf(cls, case: NetworkCase, Y: AdmittanceMatrix, pv_mode: str = PV_MAGNITUDE) -> "MismatchModel":
        p_t, q_t = specified_injections(case)
        pv = case.indices(BusKind.PV)
        pq = case.indices(BusKind.PQ)
        if pv_mode == PV_AS_PQ:
            q_rows, v_rows = tuple(sorted(pq + pv)), ()
        elif pv_mode == PV_MAGNITUDE:
            q_rows, v_rows = tuple(pq), tuple(pv)
        else:
            raise ValueError(f"unknown pv_mode {pv_mode!r}")
        return cls(tuple(case.non_slack), q_rows, v_rows, p_t, q_t,
                   np.array([b.v_set for b in case.buses]), magnitude_weights(Y))

    def restricted(self, excluded: Iterable[int]) -> "MismatchModel":
        ex = set(excluded)
        return replace(self,
                       p_rows=tuple(b for b in self.p_rows if b not in ex),
                       q_rows=tuple(b for b in self.q_rows if b not in ex),
                       v_rows=tuple(b for b in self.v_rows if b not in ex))


def magnitude_weights(Y: AdmittanceMatrix) -> np.ndarray:
    """``base * |B_ii| / 2``: maps ``|V|^2 - V_set^2`` to an MVAR-sized error."""
    return Y.base_mva * np.abs(Y.matrix.diagonal().imag) / 2.0


@dataclass(frozen=True)
class Mismatch:
    p: np.ndarray  # MW, aligned with model.p_rows
    q: np.ndarray  # MVAR-equivalent, aligned with q_rows + v_rows

    @property
    def sum_squares(self) -> float:
        return float(np.sum(self.p ** 2) + np.sum(self.q ** 2))

    @property
    def means(self) -> tuple[float, float]:
        """Mean squared active and reactive mismatch."""
        mp = float(np.mean(self.p ** 2)) if self.p.size else 0.0
        mq = float(np.mean(self.q ** 2)) if self.q.size else 0.0
        return mp, mq

    @property
    def residual(self) -> float:
        """``(mean P^2 + mean Q^2) / 2`` in (MW^2 + MVAR^2)/2."""
        return 0.5 * sum(self.means)

    def within(self, epsilon: float, each: bool = True) -> bool:
        """Residual below ``epsilon``; with ``each``, both means separately too."""
        return max(self.means) <= epsilon if each else self.residual <= epsilon


def numeric_mismatch(model: MismatchModel, Y: AdmittanceMatrix, v: VoltageState) -> Mismatch:
    p, q = compute_injections(Y, v)
    pr = np.array(model.p_rows, dtype=int)
    qr = np.array(model.q_rows, dtype=int)
    vr = np.array(model.v_rows, dtype=int)
    mp = p[pr] - model.p_target[pr]
    mq = q[qr] - model.q_target[qr]
    mv = model.v_weight[vr] * (v.mu[vr] ** 2 + v.omega[vr] ** 2 - model.v_target[vr] ** 2)
    return Mismatch(mp, np.concatenate([mq, mv]))


# -- symbolic construction ----------------------------------------------------

Affine = tuple[float, dict[int, float]]


def _voltage_affines(enc: IncrementEncoding, state: VoltageState, n: int):
    mus: list[Affine] = [(float(state.mu[j]), {}) for j in range(n)]
    oms: list[Affine] = [(float(state.omega[j]), {}) for j in range(n)]
    for pos, j in enumerate(enc.buses):
        dm, do = float(state.d_mu[j]), float(state.d_omega[j])
        b = 4 * pos
        mus[j] = (float(state.mu[j]), {b: dm, b + 1: -dm})
        oms[j] = (float(state.omega[j]), {b + 2: do, b + 3: -do})
    return mus, oms


def _combine(parts: Iterable[tuple[float, Affine]]) -> Affine:
    const = 0.0
    lin: dict[int, float] = {}
    for w, (c, l) in parts:
        if w == 0.0:
            continue
        const += w * c
        for k, v in l.items():
            lin[k] = lin.get(k, 0.0) + w * v
    return const, lin


def _affine_product(a: Affine, b: Affine, scale: float = 1.0) -> dict:
    """Terms of ``scale * a * b`` as a monomial dict."""
    ca, la = a
    cb, lb = b
    out: dict[tuple[int, ...], float] = {(): scale * ca * cb}
    for k, v in lb.items():
        out[(k,)] = out.get((k,), 0.0) + scale * ca * v
    for k, v in la.items():
        out[(k,)] = out.get((k,), 0.0) + scale * cb * v
        sv = scale * v
        for l, w in lb.items():
            key = (k,) if k == l else ((k, l) if k < l else (l, k))
            out[key] = out.get(key, 0.0) + sv * w
    return out


def _add_terms(dst: dict, src: dict, w: float = 1.0) -> None:
    for m, c in src.items():
        dst[m] = dst.get(m, 0.0) + w * c


def injection_polynomials(Y: AdmittanceMatrix, enc: IncrementEncoding, state: VoltageState,
                          buses: Iterable[int]) -> tuple[dict[int, BinaryPolynomial], dict[int, BinaryPolynomial]]:
    """Net P (MW) and Q (MVAR) at ``buses`` as polynomials in the increment bits."""
    n = Y.n
    mus, oms = _voltage_affines(enc, state, n)
    base = Y.base_mva
    P, Q = {}, {}
    for i in buses:
        row = Y.row(i)
        a = _combine((y.real, mus[j]) for j, y in row.items())
        a = _combine([(1.0, a), *((-y.imag, oms[j]) for j, y in row.items())])
        b = _combine((y.real, oms[j]) for j, y in row.items())
        b = _combine([(1.0, b), *((y.imag, mus[j]) for j, y in row.items())])
        p_terms = _affine_product(mus[i], a, base)
        _add_terms(p_terms, _affine_product(oms[i], b, base))
        q_terms = _affine_product(oms[i], a, base)
        _add_terms(q_terms, _affine_product(mus[i], b, base), -1.0)
        P[i] = BinaryPolynomial._raw(p_terms, enc.num_vars)
        Q[i] = BinaryPolynomial._raw(q_terms, enc.num_vars)
    return P, Q


def magnitude_polynomial(enc: IncrementEncoding, state: VoltageState, bus: int) -> BinaryPolynomial:
    """``mu^2 + omega^2`` at ``bus`` in the increment bits."""
    mus, oms = _voltage_affines(enc, state, state.mu.shape[0])
    terms = _affine_product(mus[bus], mus[bus])
    _add_terms(terms, _affine_product(oms[bus], oms[bus]))
    return BinaryPolynomial._raw(terms, enc.num_vars)


def mismatch_polynomials(model: MismatchModel, Y: AdmittanceMatrix, enc: IncrementEncoding,
                         state: VoltageState) -> list[BinaryPolynomial]:
    """One polynomial per balance row, in the row order of :class:`Mismatch`."""
    need = sorted(set(model.p_rows) | set(model.q_rows))
    P, Q = injection_polynomials(Y, enc, state, need)
    rows = [P[i] - float(model.p_target[i]) for i in model.p_rows]
    rows += [Q[i] - float(model.q_target[i]) for i in model.q_rows]
    for i in model.v_rows:
        m = magnitude_polynomial(enc, state, i) - float(model.v_target[i]) ** 2
        rows.append(m.scale(float(model.v_weight[i])))
    return rows


def build_pf_hamiltonian(case: NetworkCase, state: VoltageState, *, Y: AdmittanceMatrix | None = None,
                         enc: IncrementEncoding | None = None, partition_excluded: Iterable[int] = (),
                         pv_mode: str = PV_MAGNITUDE, model: MismatchModel | None = None) -> BinaryPolynomial:
    """Summed squared mismatch over the non-slack buses outside ``partition_excluded``.

    The constant term equals the squared mismatch at the base point.
    """
    Y = Y or build_admittance(case)
    enc = enc or IncrementEncoding.for_case(case)
    excluded = set(partition_excluded)
    if case.slack in excluded:
        raise ValueError("the slack bus cannot be partitioned out")
    model = (model or MismatchModel.for_pf(case, Y, pv_mode)).restricted(excluded)
    H = BinaryPolynomial.constant(0.0, enc.num_vars)
    for row in mismatch_polynomials(model, Y, enc, state):
        H.add_inplace(row.square())
    if H.degree > 4:
        raise AssertionError(f"Hamiltonian degree {H.degree} > 4")
    return H


# -- step control -------------------------------------------------------------

@dataclass(frozen=True)
class StepBounds:
    mu: tuple[float, float] = (5e-4, 4e-2)
    omega: tuple[float, float] = (1e-4, 2e-2)
    rate: float = -0.05


_HALVE_PATTERNS = {
    # (current, previous, second previous) as (up, down) bit pairs
    ((0, 1), (1, 0), (1, 0)),
    ((1, 0), (0, 1), (0, 1)),
    ((0, 1), (1, 0), (0, 1)),
    ((1, 0), (0, 1), (1, 0)),
}


def scheduled_step(lo: float, hi: float, rate: float, it: int) -> float:
    return lo + (hi - lo) * math.exp(rate * it)


def _should_halve(cur, prev, prev2) -> bool:
    total = sum(cur) + sum(prev) + sum(prev2)
    if total == 0 or total == 6:
        return True
    return (tuple(cur), tuple(prev), tuple(prev2)) in _HALVE_PATTERNS


def update_deltas(history: Sequence[Sequence[int]], d_mu: np.ndarray, d_omega: np.ndarray, it: int,
                  enc: IncrementEncoding, bounds: StepBounds = StepBounds()) -> tuple[np.ndarray, np.ndarray]:
    """Decaying step schedule, halved per bus on stagnation or oscillation, then clamped.

    ``history`` holds bit vectors oldest first; the last entry is the current one.
    """
    d_mu = np.array(d_mu, dtype=float)
    d_omega = np.array(d_omega, dtype=float)
    base_mu = scheduled_step(*bounds.mu, bounds.rate, it)
    base_om = scheduled_step(*bounds.omega, bounds.rate, it)
    idx = list(enc.buses)
    d_mu[idx] = base_mu
    d_omega[idx] = base_om
    if len(history) >= 3:
        cur, prev, prev2 = (np.asarray(h[: enc.num_vars]).reshape(-1, 4) for h in
                            (history[-1], history[-2], history[-3]))
        for pos, bus in enumerate(enc.buses):
            if _should_halve(cur[pos, 0:2], prev[pos, 0:2], prev2[pos, 0:2]):
                d_mu[bus] /= 2
            if _should_halve(cur[pos, 2:4], prev[pos, 2:4], prev2[pos, 2:4]):
                d_omega[bus] /= 2
    d_mu[idx] = np.clip(d_mu[idx], *bounds.mu)
    d_omega[idx] = np.clip(d_omega[idx], *bounds.omega)
    return d_mu, d_omega


@dataclass
class ScheduleClock:
    """Schedule iteration counter with warm restarts.

    When the residual falls by less than ``progress`` (a fraction) over
    ``window`` iterations, the current voltages become the start of a new run
    whose schedule counter begins at ``start``. ``window=0`` disables restarts.
    """

    window: int = 0
    progress: float = 0.5
    max_restarts: int = 0
    start: int = 0
    origin: int = 0
    restarts: int = 0
    scores: list[float] = field(default_factory=list)

    def local(self, it: int) -> int:
        return it - self.origin

    def observe(self, it: int, score: float) -> bool:
        """Record the residual after iteration ``it``; True if a restart begins."""
        self.scores.append(score)
        if self.window <= 0 or self.restarts >= self.max_restarts or len(self.scores) <= self.window:
            return False
        if self.scores[-1] > (1.0 - self.progress) * self.scores[-1 - self.window]:
            self.origin = it + 1 - self.start
            self.restarts += 1
            self.scores = [score]
            return True
        return False


def restart_steps(state: VoltageState, enc: IncrementEncoding, opts) -> VoltageState:
    """Steps for the first iteration after a restart."""
    d_mu = state.d_mu.copy()
    d_om = state.d_omega.copy()
    idx = list(enc.buses)
    if opts.restart_at == 0:
        d_mu[idx], d_om[idx] = opts.d_mu0, opts.d_omega0
    else:
        b = opts.bounds
        d_mu[idx] = scheduled_step(*b.mu, b.rate, opts.restart_at)
        d_om[idx] = scheduled_step(*b.omega, b.rate, opts.restart_at)
    return state.with_steps(d_mu, d_om)


# -- partitioning -------------------------------------------------------------

def partition_select(case: NetworkCase, fraction: float, seed: int, it: int) -> frozenset[int]:
    """Random non-slack buses to leave out of the mismatch sum at iteration ``it``."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    candidates = case.non_slack
    size = min(len(candidates), int(round(fraction * case.n)))
    if size == 0:
        return frozenset()
    rng = np.random.default_rng([seed, it])
    return frozenset(int(b) for b in rng.choice(candidates, size=size, replace=False))


def attempt_partition(case: NetworkCase, opts, it: int, attempt: int) -> frozenset[int]:
    if opts.partition_fraction <= 0:
        return frozenset()
    seed = opts.seed if attempt == 0 or not opts.partition_redraw else iteration_seed(opts.seed, it, attempt)
    return partition_select(case, opts.partition_fraction, seed, it)


def frozen_steps(state: VoltageState, buses: Iterable[int]) -> VoltageState:
    """Zero steps at ``buses``: their bits drop out of the Hamiltonian and decode to no move."""
    idx = list(buses)
    if not idx:
        return state
    d_mu, d_om = state.d_mu.copy(), state.d_omega.copy()
    d_mu[idx] = 0.0
    d_om[idx] = 0.0
    return state.with_steps(d_mu, d_om)


# -- outer loop ---------------------------------------------------------------

@dataclass(frozen=True)
class AqpfOptions:
    epsilon: float = 1e-2  # (MW^2 + MVAR^2)/2
    stop_each: bool = True  # also require mean P^2 and mean Q^2 each below epsilon
    it_max: int = 200
    d_mu0: float = 1e-2
    d_omega0: float = 1e-3
    mu0: float = 1.0
    omega0: float = 0.0
    bounds: StepBounds = StepBounds()
    pv_mode: str = PV_MAGNITUDE
    partition_fraction: float = 0.0
    partition_freeze: bool = True  # excluded buses hold their voltage for the iteration
    partition_redraw: bool = True  # each retry draws a fresh excluded set
    seed: int = 0
    lam: float = 2.0
    num_reads: int = 8
    sweeps: int | None = None  # default: 8 per original variable, within [200, 2000]
    beta_calibration: float = 1.0
    replicas: int = 1
    moves: str = "composite"
    polish: bool = True
    max_retries: int = 4
    stall_limit: int = 5
    retry_memory: bool = True  # start the next iteration one halving above the one that succeeded
    restart_window: int = 30
    restart_progress: float = 0.5
    restart_at: int = 50  # schedule counter at the start of a restarted run
    max_restarts: int = 20
    anneal_config: AnnealConfig | None = None


@dataclass
class IterationRecord:
    it: int
    residual: float
    sum_squares: float
    energy: float
    accepted: bool
    retries: int
    aux_violations: int
    num_vars: int
    num_aux: int
    excluded: list[int]
    d_mu: list[float]
    d_omega: list[float]
    t_build: float
    t_quadratize: float
    t_anneal: float
    t_update: float
    extra: dict = field(default_factory=dict)


@dataclass
class SolveTrace:
    case: str
    solver: str
    records: list[IterationRecord]
    state: VoltageState
    converged: bool
    initial_residual: float
    counts: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def residual(self) -> float:
        return self.records[-1].residual if self.records else self.initial_residual

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def residuals(self) -> list[float]:
        return [r.residual for r in self.records]

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "solver": self.solver,
            "converged": self.converged,
            "iterations": self.iterations,
            "initial_residual": self.initial_residual,
            "residual": self.residual,
            "counts": self.counts,
            "options": self.options,
            "summary": self.summary,
            "state": {"mu": self.state.mu.tolist(), "omega": self.state.omega.tolist(),
                      "d_mu": self.state.d_mu.tolist(), "d_omega": self.state.d_omega.tolist()},
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, default=_json_default)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["case", "solver", "iter", "residual", "sum_squares", "energy", "accepted", "retries",
                    "aux_violations", "num_vars", "num_aux", "t_build", "t_quadratize", "t_anneal", "t_update"])
        for r in self.records:
            w.writerow([self.case, self.solver, r.it, repr(r.residual), repr(r.sum_squares), repr(r.energy),
                        int(r.accepted), r.retries, r.aux_violations, r.num_vars, r.num_aux,
                        f"{r.t_build:.6f}", f"{r.t_quadratize:.6f}", f"{r.t_anneal:.6f}", f"{r.t_update:.6f}"])
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def initial_state(case: NetworkCase, opts: AqpfOptions) -> VoltageState:
    mu = np.full(case.n, opts.mu0)
    om = np.full(case.n, opts.omega0)
    s = case.slack
    mu[s], om[s] = case.buses[s].v_set, 0.0
    d_mu = np.full(case.n, opts.d_mu0)
    d_om = np.full(case.n, opts.d_omega0)
    return VoltageState(mu, om, d_mu, d_om)


def anneal_config_for(qubo, groups: MoveGroups | None, opts, seed: int) -> AnnealConfig:
    if opts.anneal_config is not None:
        return replace(opts.anneal_config, seed=seed)
    use_groups = groups if opts.moves == "composite" else None
    cfg = tune_defaults(qubo, calibration=opts.beta_calibration, seed=seed, groups=use_groups)
    n0 = groups.num_original if groups is not None else qubo.n
    sweeps = opts.sweeps if opts.sweeps is not None else int(min(2000, max(200, 8 * n0)))
    return replace(cfg, num_reads=opts.num_reads, sweeps=sweeps, replicas=opts.replicas,
                   beta_min=float(cfg.beta_min), beta_max=float(cfg.beta_max))


def scaled_steps(state: VoltageState, level: int) -> VoltageState:
    if level == 0:
        return state
    f = 0.5 ** level
    return state.with_steps(state.d_mu * f, state.d_omega * f)


def next_level(level: int, retries: int, opts) -> int:
    """Halving level for the first attempt of the next iteration."""
    if not opts.retry_memory:
        return 0
    return min(MAX_LEVEL, max(0, level + retries - 1))


def make_clock(opts, residual: float) -> ScheduleClock:
    return ScheduleClock(opts.restart_window, opts.restart_progress, opts.max_restarts, opts.restart_at,
                         scores=[residual])


def iteration_seed(seed: int, it: int, attempt: int) -> int:
    return (seed * 1_000_003 + it * 101 + attempt) & ((1 << 63) - 1)


@dataclass
class StepOutcome:
    bits: np.ndarray
    energy: float
    violations: int
    num_vars: int
    num_aux: int
    t_build: float
    t_quadratize: float
    t_anneal: float


def solve_step(H_builder, num_original: int, opts, seed: int) -> StepOutcome:
    """Build, quadratize and anneal one Hamiltonian; return the projected best bits."""
    t0 = time.perf_counter()
    H = H_builder()
    t1 = time.perf_counter()
    qubo, rmap = quadratize(H, opts.lam, num_vars=num_original)
    groups = MoveGroups.from_reduction(rmap)
    t2 = time.perf_counter()
    cfg = anneal_config_for(qubo, groups, opts, seed)
    ss = anneal(qubo, cfg, groups if cfg.moves == "composite" else None)
    best = np.array(ss.first.bits, dtype=np.int8)
    energy = ss.first.energy
    if opts.polish:
        best, energy = greedy_descent(qubo, repair_auxiliaries(best, rmap))
    proj = project_solution(best, rmap)
    bits = proj.bits
    # variables absent from every term carry no information; keep them idle
    used = H.variables()
    idle = [i for i in range(num_original) if i not in used]
    if idle:
        bits[idle] = 0
    t3 = time.perf_counter()
    return StepOutcome(bits, float(energy), proj.violations, qubo.n, rmap.num_aux, t1 - t0, t2 - t1, t3 - t2)


def variable_counts(case: NetworkCase, *, pv_mode: str = PV_MAGNITUDE, lam: float = 2.0) -> dict:
    """Base and auxiliary variable counts of the full PF QUBO at the initial point."""
    Y = build_admittance(case)
    enc = IncrementEncoding.for_case(case)
    state = initial_state(case, AqpfOptions())
    H = build_pf_hamiltonian(case, state, Y=Y, enc=enc, pv_mode=pv_mode)
    _, rmap = quadratize(H, lam, num_vars=enc.num_vars)
    return {"base": enc.num_vars, "slack": 0, "auxiliary": rmap.num_aux,
            "total": enc.num_vars + rmap.num_aux}


def run_aqpf(case: NetworkCase, options: AqpfOptions | None = None) -> SolveTrace:
    """Iterate build, quadratize, anneal, update until the residual drops below epsilon."""
    opts = options or AqpfOptions()
    Y = build_admittance(case)
    enc = IncrementEncoding.for_case(case)
    model = MismatchModel.for_pf(case, Y, opts.pv_mode)
    state = initial_state(case, opts)
    mm = numeric_mismatch(model, Y, state)
    residual = mm.residual
    done = mm.within(opts.epsilon, opts.stop_each)
    trace = SolveTrace(case.name, "aqpf", [], state, done, residual,
                       counts={"base": enc.num_vars, "slack": 0},
                       options=_options_dict(opts))
    history: list[np.ndarray] = []
    clock = make_clock(opts, residual)
    stalls = 0
    level = 0
    it = 0
    while not done and it < opts.it_max:
        trial = scaled_steps(state, level)
        accepted = False
        retries = 0
        t_build = t_quad = t_anneal = 0.0
        t_u0 = 0.0
        for attempt in range(opts.max_retries + 1):
            excluded = attempt_partition(case, opts, it, attempt)
            step = frozen_steps(trial, excluded) if opts.partition_freeze else trial
            out = solve_step(
                lambda: build_pf_hamiltonian(case, step, Y=Y, enc=enc, partition_excluded=excluded, model=model),
                enc.num_vars, opts, iteration_seed(opts.seed, it, attempt))
            t_build += out.t_build
            t_quad += out.t_quadratize
            t_anneal += out.t_anneal
            t_u0 = time.perf_counter()
            cand = decode(enc, step, out.bits)
            cand_mm = numeric_mismatch(model, Y, cand)
            moved = any(np.any(m) for m in enc.moves(out.bits))
            if moved and cand_mm.residual <= residual:
                accepted = True
                break
            retries += 1
            trial = trial.with_steps(trial.d_mu / 2, trial.d_omega / 2)
        if accepted:
            bits = out.bits
            mm = cand_mm
            residual = cand_mm.residual
            new_mu, new_om = cand.mu, cand.omega
            stalls = 0
            level = next_level(level, retries, opts)
        else:
            bits = np.zeros(enc.num_vars, dtype=np.int8)
            new_mu, new_om = state.mu, state.omega
            stalls += 1
            level = next_level(level, retries, opts)
        history.append(bits)
        d_mu, d_om = update_deltas(history[-3:], state.d_mu, state.d_omega, clock.local(it), enc, opts.bounds)
        state = VoltageState(new_mu, new_om, d_mu, d_om)
        done = mm.within(opts.epsilon, opts.stop_each)
        restarted = not done and clock.observe(it, residual)
        if restarted:
            history.clear()
            level = 0
            state = restart_steps(state, enc, opts)
        t_update = time.perf_counter() - t_u0
        trace.records.append(IterationRecord(
            it=it, residual=residual, sum_squares=mm.sum_squares, energy=out.energy, accepted=accepted,
            retries=retries, aux_violations=out.violations, num_vars=out.num_vars, num_aux=out.num_aux,
            excluded=sorted(excluded), d_mu=state.d_mu.tolist(), d_omega=state.d_omega.tolist(),
            t_build=t_build, t_quadratize=t_quad, t_anneal=t_anneal, t_update=t_update,
            extra={"restart": restarted, "level": level}))
        log.debug("aqpf %s it=%d residual=%.4e accepted=%s retries=%d", case.name, it, residual, accepted, retries)
        it += 1
        trace.state = state
        if stalls >= opts.stall_limit and not done:
            trace.converged = False
            _finish(trace, enc)
            raise StallError(f"no improving update in {stalls} consecutive iterations "
                             f"(residual {residual:.4e})", trace)
    trace.state = state
    trace.converged = done
    _finish(trace, enc)
    return trace


def _finish(trace: SolveTrace, enc: IncrementEncoding) -> None:
    if trace.records:
        full = [r for r in trace.records if not r.excluded] or trace.records
        trace.counts.update(auxiliary=max(r.num_aux for r in full),
                            total=max(r.num_vars for r in full))
        times = [r.t_build + r.t_quadratize + r.t_anneal + r.t_update for r in trace.records]
        trace.summary.update(
            restarts=sum(bool(r.extra.get("restart")) for r in trace.records),
            compile_time=trace.records[0].t_build + trace.records[0].t_quadratize,
            time_per_iteration=float(np.mean(times)),
            total_time=float(np.sum(times)),
        )
    else:
        trace.counts.setdefault("auxiliary", 0)
        trace.counts.setdefault("total", enc.num_vars)


def _options_dict(opts) -> dict:
    d = asdict(opts)
    return json.loads(json.dumps(d, default=_json_default))
