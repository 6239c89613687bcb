"""Metropolis annealing for QUBO models, with optional replica exchange.

Every read owns a counter-derived xorshift stream, so results do not depend on
how many threads execute the reads or in which order.

Two move sets are available. ``single`` flips one variable at a time.
``composite`` is for QUBOs produced by quadratization: flipping an original
variable also resets every auxiliary that depends on it to the product of its
parents, so reads never pay the consistency penalty and the landscape seen by
the walk is that of the original polynomial. Samples are QUBO assignments
either way.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numba as nb
import numpy as np

from .pubo import QuboModel, ReductionMap

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class AnnealConfig:
    num_reads: int = 32
    sweeps: int = 1000
    schedule: str = "geometric"
    beta_min: float = 0.1
    beta_max: float = 10.0
    replicas: int = 1
    exchange_interval: int = 10
    seed: int = 0
    time_limit: float | None = None
    moves: str = "single"

    def __post_init__(self):
        if self.num_reads < 1 or self.sweeps < 1 or self.replicas < 1:
            raise ValueError("num_reads, sweeps and replicas must be >= 1")
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        if self.schedule not in ("geometric", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.exchange_interval < 1:
            raise ValueError("exchange_interval must be >= 1")
        if self.moves not in ("single", "composite"):
            raise ValueError(f"unknown move set {self.moves!r}")


@dataclass(frozen=True)
class MoveGroups:
    """Auxiliary dependencies of a quadratized model, in flat arrays.

    ``children[ptr[i]:ptr[i+1]]`` are the auxiliaries with original variable
    ``i`` as a parent; ``parent_a[z] * parent_b[z]`` is the consistent value
    of auxiliary ``z``.
    """

    num_original: int
    ptr: np.ndarray
    children: np.ndarray
    parent_a: np.ndarray
    parent_b: np.ndarray

    @classmethod
    def from_reduction(cls, rmap: ReductionMap) -> "MoveGroups":
        n0, n = rmap.num_original, rmap.num_total
        kids: list[list[int]] = [[] for _ in range(n0)]
        pa = np.full(n, -1, dtype=np.int64)
        pb = np.full(n, -1, dtype=np.int64)
        for z, (i, j) in sorted(rmap.aux.items()):
            if i >= n0 or j >= n0:
                raise ValueError("composite moves need auxiliaries over original variables")
            kids[i].append(z)
            kids[j].append(z)
            pa[z], pb[z] = i, j
        ptr = np.zeros(n0 + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(k) for k in kids])
        flat = np.array([z for k in kids for z in k], dtype=np.int64)
        return cls(n0, ptr, flat, pa, pb)

    @classmethod
    def empty(cls) -> "MoveGroups":
        z = np.zeros(0, dtype=np.int64)
        return cls(0, np.zeros(1, dtype=np.int64), z, z, z)


@dataclass(frozen=True)
class Sample:
    bits: tuple[int, ...]
    energy: float
    count: int


@dataclass
class SampleSet:
    records: list[Sample]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def first(self) -> Sample:
        return self.records[0]

    @property
    def truncated(self) -> bool:
        return bool(self.metadata.get("truncated", False))

    def __len__(self) -> int:
        return len(self.records)

    def bits_array(self) -> np.ndarray:
        return np.array([r.bits for r in self.records], dtype=np.int8)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) or 0x2545F4914F6CDD1D


def read_seeds(seed: int, start: int, stop: int) -> np.ndarray:
    """Independent stream seeds for reads ``start..stop-1`` of a master seed."""
    base = _splitmix64(seed & _MASK)
    return np.array([_splitmix64(base ^ ((k * 0xD1B54A32D192ED03) & _MASK)) for k in range(start, stop)],
                    dtype=np.uint64)


@nb.njit(cache=True, inline="always")
def _next(state):
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return x * np.uint64(0x2545F4914F6CDD1D)


@nb.njit(cache=True, inline="always")
def _uniform(state):
    return (_next(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def _init(indptr, indices, weights, lin, x, fld):
    n = lin.size
    e = 0.0
    for i in range(n):
        f = lin[i]
        for p in range(indptr[i], indptr[i + 1]):
            f += weights[p] * x[indices[p]]
        fld[i] = f
    for i in range(n):
        if x[i]:
            e += lin[i]
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j > i and x[j]:
                    e += weights[p]
    return e


@nb.njit(cache=True, inline="always")
def _sweep(indptr, indices, weights, x, fld, beta, rng, e):
    n = x.size
    for i in range(n):
        d = fld[i] if x[i] == 0 else -fld[i]
        if d <= 0.0 or _uniform(rng) < math.exp(-beta * d):
            s = 1.0 if x[i] == 0 else -1.0
            x[i] = 1 - x[i]
            e += d
            for p in range(indptr[i], indptr[i + 1]):
                fld[indices[p]] += s * weights[p]
    return e


@nb.njit(cache=True, inline="always")
def _flip(i, x, fld, indptr, indices, weights):
    s = 1.0 if x[i] == 0 else -1.0
    x[i] = 1 - x[i]
    for p in range(indptr[i], indptr[i + 1]):
        fld[indices[p]] += s * weights[p]


@nb.njit(cache=True)
def _group_sweep(indptr, indices, weights, x, fld, beta, rng, e, g_ptr, g_kids, g_pa, g_pb, buf):
    n0 = g_ptr.size - 1
    for i in range(n0):
        d = fld[i] if x[i] == 0 else -fld[i]
        _flip(i, x, fld, indptr, indices, weights)
        m = 0
        for q in range(g_ptr[i], g_ptr[i + 1]):
            z = g_kids[q]
            v = x[g_pa[z]] & x[g_pb[z]]
            if v != x[z]:
                d += fld[z] if x[z] == 0 else -fld[z]
                _flip(z, x, fld, indptr, indices, weights)
                buf[m] = z
                m += 1
        if d <= 0.0 or _uniform(rng) < math.exp(-beta * d):
            e += d
        else:
            for k in range(m - 1, -1, -1):
                _flip(buf[k], x, fld, indptr, indices, weights)
            _flip(i, x, fld, indptr, indices, weights)
    return e


@nb.njit(cache=True)
def _random_start(rng, x, g_ptr, g_pa, g_pb):
    n = x.size
    for i in range(n):
        x[i] = np.int8(_next(rng) >> np.uint64(63))
    if g_ptr.size > 1:
        for z in range(n):
            if g_pa[z] >= 0:
                x[z] = x[g_pa[z]] & x[g_pb[z]]


@nb.njit(cache=True)
def _any_sweep(indptr, indices, weights, x, fld, beta, rng, e, g_ptr, g_kids, g_pa, g_pb, buf):
    if g_ptr.size > 1:
        return _group_sweep(indptr, indices, weights, x, fld, beta, rng, e, g_ptr, g_kids, g_pa, g_pb, buf)
    return _sweep(indptr, indices, weights, x, fld, beta, rng, e)


@nb.njit(cache=True)
def _sa_read(indptr, indices, weights, lin, betas, seed, best_x, g_ptr, g_kids, g_pa, g_pb):
    n = lin.size
    rng = np.empty(1, dtype=np.uint64)
    rng[0] = seed
    x = np.empty(n, dtype=np.int8)
    _random_start(rng, x, g_ptr, g_pa, g_pb)
    buf = np.empty(max(1, g_kids.size), dtype=np.int64)
    fld = np.empty(n)
    e = _init(indptr, indices, weights, lin, x, fld)
    best = e
    best_x[:] = x
    for k in range(betas.size):
        e = _any_sweep(indptr, indices, weights, x, fld, betas[k], rng, e, g_ptr, g_kids, g_pa, g_pb, buf)
        if e < best:
            best = e
            best_x[:] = x
    return best


@nb.njit(cache=True)
def _pt_read(indptr, indices, weights, lin, ladder, sweeps, interval, seed, best_x, g_ptr, g_kids, g_pa, g_pb):
    n = lin.size
    r = ladder.size
    rng = np.empty(1, dtype=np.uint64)
    rng[0] = seed
    xs = np.empty((r, n), dtype=np.int8)
    flds = np.empty((r, n))
    es = np.empty(r)
    buf = np.empty(max(1, g_kids.size), dtype=np.int64)
    for a in range(r):
        _random_start(rng, xs[a], g_ptr, g_pa, g_pb)
        es[a] = _init(indptr, indices, weights, lin, xs[a], flds[a])
    perm = np.arange(r)  # ladder slot -> replica
    best = es[0]
    best_x[:] = xs[0]
    for a in range(r):
        if es[a] < best:
            best = es[a]
            best_x[:] = xs[a]
    for s in range(sweeps):
        for k in range(r):
            a = perm[k]
            es[a] = _any_sweep(indptr, indices, weights, xs[a], flds[a], ladder[k], rng, es[a],
                               g_ptr, g_kids, g_pa, g_pb, buf)
            if es[a] < best:
                best = es[a]
                best_x[:] = xs[a]
        if (s + 1) % interval == 0:
            for k in range(r - 1):
                a = perm[k]
                b = perm[k + 1]
                arg = (ladder[k] - ladder[k + 1]) * (es[a] - es[b])
                if arg >= 0.0 or _uniform(rng) < math.exp(arg):
                    perm[k] = b
                    perm[k + 1] = a
    return best


@nb.njit(cache=True, parallel=True)
def _run_reads(indptr, indices, weights, lin, betas, ladder, sweeps, interval, seeds, out_x, out_e,
               g_ptr, g_kids, g_pa, g_pb):
    for k in nb.prange(seeds.size):
        if ladder.size > 1:
            out_e[k] = _pt_read(indptr, indices, weights, lin, ladder, sweeps, interval, seeds[k], out_x[k],
                                g_ptr, g_kids, g_pa, g_pb)
        else:
            out_e[k] = _sa_read(indptr, indices, weights, lin, betas, seeds[k], out_x[k],
                                g_ptr, g_kids, g_pa, g_pb)


@nb.njit(cache=True)
def _probe(indptr, indices, weights, lin, seed, rounds, g_ptr, g_kids, g_pa, g_pb, out):
    # composite-move energy changes at random consistent states (nothing accepted)
    n = lin.size
    n0 = g_ptr.size - 1
    rng = np.empty(1, dtype=np.uint64)
    rng[0] = seed
    x = np.empty(n, dtype=np.int8)
    fld = np.empty(n)
    buf = np.empty(max(1, g_kids.size), dtype=np.int64)
    k = 0
    for r in range(rounds):
        _random_start(rng, x, g_ptr, g_pa, g_pb)
        _init(indptr, indices, weights, lin, x, fld)
        for i in range(n0):
            d = fld[i] if x[i] == 0 else -fld[i]
            _flip(i, x, fld, indptr, indices, weights)
            m = 0
            for q in range(g_ptr[i], g_ptr[i + 1]):
                z = g_kids[q]
                v = x[g_pa[z]] & x[g_pb[z]]
                if v != x[z]:
                    d += fld[z] if x[z] == 0 else -fld[z]
                    _flip(z, x, fld, indptr, indices, weights)
                    buf[m] = z
                    m += 1
            for j in range(m - 1, -1, -1):
                _flip(buf[j], x, fld, indptr, indices, weights)
            _flip(i, x, fld, indptr, indices, weights)
            out[k] = d
            k += 1


@nb.njit(cache=True)
def _descend(indptr, indices, weights, lin, x):
    n = lin.size
    fld = np.empty(n)
    e = _init(indptr, indices, weights, lin, x, fld)
    while True:
        best_d = 0.0
        best_i = -1
        for i in range(n):
            d = fld[i] if x[i] == 0 else -fld[i]
            if d < best_d - 1e-12:
                best_d = d
                best_i = i
        if best_i < 0:
            return e
        s = 1.0 if x[best_i] == 0 else -1.0
        x[best_i] = 1 - x[best_i]
        e += best_d
        for p in range(indptr[best_i], indptr[best_i + 1]):
            fld[indices[p]] += s * weights[p]


def csr_arrays(q: QuboModel):
    """Symmetric CSR adjacency ``(indptr, indices, weights)`` and linear vector."""
    lin, r, c, v = q.arrays()
    rows = np.concatenate([r, c])
    cols = np.concatenate([c, r])
    vals = np.concatenate([v, v])
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(q.n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, cols.astype(np.int64), vals.astype(np.float64), lin.astype(np.float64)


def beta_schedule(cfg: AnnealConfig) -> np.ndarray:
    if cfg.sweeps == 1:
        return np.array([cfg.beta_max])
    if cfg.schedule == "geometric":
        return np.geomspace(cfg.beta_min, cfg.beta_max, cfg.sweeps)
    return np.linspace(cfg.beta_min, cfg.beta_max, cfg.sweeps)


def greedy_descent(q: QuboModel, x) -> tuple[np.ndarray, float]:
    """Steepest single-flip descent to a local minimum."""
    indptr, indices, weights, lin = csr_arrays(q)
    x = np.array(x, dtype=np.int8)
    e = _descend(indptr, indices, weights, lin, x)
    return x, float(e + q.offset)


def _group_arrays(cfg: AnnealConfig, groups: MoveGroups | None, n: int):
    if cfg.moves == "single":
        g = MoveGroups.empty()
    else:
        if groups is None:
            raise ValueError("composite moves need the model's MoveGroups")
        if groups.parent_a.size != n:
            raise ValueError("MoveGroups do not match the model size")
        g = groups
    return g.ptr, g.children, g.parent_a, g.parent_b


def anneal(q: QuboModel, cfg: AnnealConfig | None = None, groups: MoveGroups | None = None) -> SampleSet:
    """Sample low-energy states of ``q``; identical inputs give identical output.

    ``groups`` is required when ``cfg.moves == "composite"``.
    """
    cfg = cfg or AnnealConfig()
    t0 = time.perf_counter()
    n = q.n
    meta: dict[str, Any] = {"config": asdict(cfg), "truncated": False}
    if n == 0:
        meta.update(wall_time=0.0, sweeps_executed=0, reads_executed=cfg.num_reads)
        return SampleSet([Sample((), float(q.offset), cfg.num_reads)], meta)

    indptr, indices, weights, lin = csr_arrays(q)
    garr = _group_arrays(cfg, groups, n)
    betas = beta_schedule(cfg)
    ladder = (np.geomspace(cfg.beta_min, cfg.beta_max, cfg.replicas)
              if cfg.replicas > 1 else np.zeros(1))
    batch = cfg.num_reads if cfg.time_limit is None else max(1, nb.get_num_threads())
    xs = np.zeros((cfg.num_reads, n), dtype=np.int8)
    es = np.zeros(cfg.num_reads)
    done = 0
    while done < cfg.num_reads:
        stop = min(cfg.num_reads, done + batch)
        _run_reads(indptr, indices, weights, lin, betas, ladder, cfg.sweeps, cfg.exchange_interval,
                   read_seeds(cfg.seed, done, stop), xs[done:stop], es[done:stop], *garr)
        done = stop
        if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit and done < cfg.num_reads:
            meta["truncated"] = True
            log.info("anneal time limit hit after %d of %d reads", done, cfg.num_reads)
            break
    xs = xs[:done]

    uniq, counts = np.unique(xs, axis=0, return_counts=True)
    energies = q.energies(uniq)
    order = np.lexsort(tuple(uniq[:, ::-1].T) + (energies,))
    records = [Sample(tuple(int(b) for b in uniq[k]), float(energies[k]), int(counts[k])) for k in order]
    per_replica = cfg.replicas if cfg.replicas > 1 else 1
    meta.update(
        wall_time=time.perf_counter() - t0,
        sweeps_executed=done * cfg.sweeps * per_replica,
        reads_executed=done,
        raw_best_energy=float(es.min()) + q.offset,
    )
    return SampleSet(records, meta)


def _reads_for_size(n: int) -> int:
    lo_n, hi_n = 100, 100_000
    if n <= lo_n:
        return 2_000
    if n >= hi_n:
        return 100_000
    t = math.log(n / lo_n) / math.log(hi_n / lo_n)
    return int(round(math.exp(math.log(2_000) + t * math.log(100_000 / 2_000))))


def beta_range(q: QuboModel, *, calibration: float = 1.0) -> tuple[float, float]:
    """Inverse temperatures from the spread of single-flip energy changes.

    The hot end accepts the largest possible flip cost with probability 1/2;
    the cold end accepts the smallest nonzero coefficient with probability 1/100.
    ``calibration`` scales the cold end.
    """
    lin, rows, cols, vals = q.arrays()
    bound = np.abs(lin)
    np.add.at(bound, rows, np.abs(vals))
    np.add.at(bound, cols, np.abs(vals))
    coeffs = np.abs(np.concatenate([lin, vals]))
    coeffs = coeffs[coeffs > 0]
    if coeffs.size == 0:
        return 0.1, 1.0
    hi = float(bound.max())
    lo = max(float(coeffs.min()), 1e-9 * hi)
    beta_min = math.log(2.0) / hi
    beta_max = max(calibration * math.log(100.0) / lo, beta_min)
    return beta_min, beta_max


def probed_beta_range(q: QuboModel, groups: MoveGroups, *, calibration: float = 1.0, rounds: int = 8,
                      seed: int = 0) -> tuple[float, float]:
    """Like :func:`beta_range`, but from composite-move energy changes sampled at random states."""
    if groups.num_original == 0:
        return 0.1, 1.0
    indptr, indices, weights, lin = csr_arrays(q)
    out = np.empty(rounds * groups.num_original)
    _probe(indptr, indices, weights, lin, read_seeds(seed, 0, 1)[0], rounds,
           groups.ptr, groups.children, groups.parent_a, groups.parent_b, out)
    d = np.abs(out)
    d = d[d > 1e-12 * max(1.0, float(d.max()))]
    if d.size == 0:
        return 0.1, 1.0
    hi, lo = float(d.max()), float(d.min())
    beta_min = math.log(2.0) / hi
    return beta_min, max(calibration * math.log(100.0) / lo, 2 * beta_min)


def tune_defaults(q: QuboModel, *, calibration: float = 1.0, seed: int = 0,
                  groups: MoveGroups | None = None) -> AnnealConfig:
    """Budget and temperature range derived from the model's coefficients.

    With ``groups`` the result uses composite moves and a probed temperature range.
    """
    if q.n == 0 or q.max_abs_coeff() == 0:
        return AnnealConfig(num_reads=1, sweeps=1, beta_min=0.1, beta_max=1.0, seed=seed)
    if groups is not None:
        beta_min, beta_max = probed_beta_range(q, groups, calibration=calibration, seed=seed)
        sweeps = int(min(5_000, max(100, 4 * groups.num_original)))
        return AnnealConfig(num_reads=_reads_for_size(q.n), sweeps=sweeps, beta_min=beta_min,
                            beta_max=beta_max, seed=seed, moves="composite")
    beta_min, beta_max = beta_range(q, calibration=calibration)
    sweeps = int(min(5_000, max(100, 4 * q.n)))
    reads = _reads_for_size(q.n)
    log.debug("tune_defaults: n=%d reads=%d sweeps=%d beta=[%.3g, %.3g]", q.n, reads, sweeps, beta_min, beta_max)
    return AnnealConfig(num_reads=reads, sweeps=sweeps, beta_min=beta_min, beta_max=beta_max, seed=seed)
