"""Grid data model, bus admittance assembly and rectangular power injections.

All internal math is per-unit on the case MVA base. Bus indices are dense and
0-based; the original file ids are kept on each :class:`Bus` as ``ext_id``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class CaseError(ValueError):
    """Raised when a case violates a structural invariant."""


class BusKind(str, enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float = 0.0  # MW
    q_demand: float = 0.0  # MVAR
    v_set: float = 1.0  # p.u., meaningful for PV/slack
    v_min: float = 0.9
    v_max: float = 1.1
    delta_min: float = -180.0  # degrees
    delta_max: float = 180.0
    g_shunt: float = 0.0  # MW consumed at V = 1 p.u.
    b_shunt: float = 0.0  # MVAR injected at V = 1 p.u.
    ext_id: int | None = None


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0  # total line charging, p.u.
    tap_ratio: float = 1.0
    shift_deg: float = 0.0
    circuit: int = 1


@dataclass(frozen=True)
class Generator:
    bus: int
    p_out: float = 0.0  # MW
    q_out: float = 0.0  # MVAR
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    v_set: float = 1.0
    cost_coeffs: tuple[float, float, float] = (0.0, 1.0, 0.0)  # (c2, c1, c0), $/h
    cost_defaulted: bool = False


@dataclass(frozen=True)
class NetworkCase:
    name: str
    mva_base: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind is BusKind.SLACK)

    def indices(self, *kinds: BusKind) -> list[int]:
        return [b.id for b in self.buses if b.kind in kinds]

    @property
    def non_slack(self) -> list[int]:
        return self.indices(BusKind.PV, BusKind.PQ)

    def generators_at(self, bus: int) -> list[Generator]:
        return [g for g in self.generators if g.bus == bus]

    def ext_ids(self) -> list[int]:
        return [b.ext_id if b.ext_id is not None else b.id for b in self.buses]

    def with_name(self, name: str) -> "NetworkCase":
        return replace(self, name=name)


def validate_case(case: NetworkCase) -> None:
    """Check the structural invariants of a case, raising :class:`CaseError`."""
    if not case.mva_base > 0:
        raise CaseError(f"mva_base must be positive, got {case.mva_base}")
    if case.n == 0:
        raise CaseError("case has no buses")
    for pos, bus in enumerate(case.buses):
        if bus.id != pos:
            raise CaseError(f"bus at position {pos} has internal id {bus.id}")
        if bus.v_min > bus.v_max:
            raise CaseError(f"bus {pos}: v_min > v_max")
        if bus.delta_min > bus.delta_max:
            raise CaseError(f"bus {pos}: delta_min > delta_max")
        if not (math.isfinite(bus.p_demand) and math.isfinite(bus.q_demand)):
            raise CaseError(f"bus {pos}: non-finite demand")
    n_slack = sum(b.kind is BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    seen = set()
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < case.n:
                raise CaseError(f"branch {k}: endpoint {end} does not resolve to a bus")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {k}: from == to ({br.from_bus})")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {k} ({br.from_bus}-{br.to_bus}): zero impedance")
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus), br.circuit)
        if key in seen:
            raise CaseError(
                f"branch {k}: duplicate {br.from_bus}-{br.to_bus} without a distinct circuit id"
            )
        seen.add(key)
    for k, g in enumerate(case.generators):
        if not 0 <= g.bus < case.n:
            raise CaseError(f"generator {k}: bus {g.bus} does not resolve")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseError(f"generator {k}: inverted limits")
        if not all(math.isfinite(c) for c in g.cost_coeffs):
            raise CaseError(f"generator {k}: non-finite cost coefficients")


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse bus admittance ``Y = G + jB`` in per-unit."""

    n: int
    matrix: sp.csr_matrix
    base_mva: float = 1.0

    @property
    def G(self) -> sp.csr_matrix:
        return self.matrix.real.tocsr()

    @property
    def B(self) -> sp.csr_matrix:
        return self.matrix.imag.tocsr()

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def neighbors(self, i: int) -> np.ndarray:
        """Column indices in row ``i`` (including ``i`` itself when present)."""
        m = self.matrix
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def row(self, i: int) -> dict[int, complex]:
        m = self.matrix
        sl = slice(m.indptr[i], m.indptr[i + 1])
        return dict(zip(m.indices[sl].tolist(), m.data[sl].tolist()))


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix with the standard pi branch model.

    Off-nominal taps and phase shifts sit on the from side.
    """
    n = case.n
    rows, cols, vals = [], [], []
    for br in case.branches:
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_shunt
        tap = (br.tap_ratio or 1.0) * np.exp(1j * math.radians(br.shift_deg))
        f, t = br.from_bus, br.to_bus
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [
            (ys + bc) / (tap * tap.conjugate()),
            ys + bc,
            -ys / tap.conjugate(),
            -ys / tap,
        ]
    for bus in case.buses:
        if bus.g_shunt or bus.b_shunt:
            rows.append(bus.id)
            cols.append(bus.id)
            vals.append(complex(bus.g_shunt, bus.b_shunt) / case.mva_base)
    y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    y.sum_duplicates()
    y.sort_indices()
    return AdmittanceMatrix(n=n, matrix=y, base_mva=case.mva_base)


@dataclass(frozen=True)
class VoltageState:
    mu: np.ndarray
    omega: np.ndarray
    d_mu: np.ndarray = field(default=None)
    d_omega: np.ndarray = field(default=None)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        om = np.array(self.omega, dtype=float)
        if mu.shape != om.shape:
            raise ValueError("mu and omega must have the same shape")
        d_mu = np.zeros_like(mu) if self.d_mu is None else np.array(self.d_mu, dtype=float)
        d_om = np.zeros_like(om) if self.d_omega is None else np.array(self.d_omega, dtype=float)
        for name, arr in (("mu", mu), ("omega", om), ("d_mu", d_mu), ("d_omega", d_om)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "d_mu", d_mu)
        object.__setattr__(self, "d_omega", d_om)

    @classmethod
    def from_complex(cls, v: Sequence[complex], **kw) -> "VoltageState":
        v = np.asarray(v, dtype=complex)
        return cls(v.real, v.imag, **kw)

    @property
    def complex(self) -> np.ndarray:
        return self.mu + 1j * self.omega

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.mu, self.omega)

    @property
    def angle_deg(self) -> np.ndarray:
        return np.degrees(np.arctan2(self.omega, self.mu))

    def with_voltages(self, mu, omega) -> "VoltageState":
        return VoltageState(mu, omega, self.d_mu, self.d_omega)

    def with_steps(self, d_mu, d_omega) -> "VoltageState":
        return VoltageState(self.mu, self.omega, d_mu, d_omega)


def flat_start(case: NetworkCase, *, use_setpoints: bool = True) -> VoltageState:
    """Flat voltage profile; generator buses at their set-point magnitude if asked."""
    mu = np.ones(case.n)
    if use_setpoints:
        for b in case.buses:
            if b.kind is not BusKind.PQ:
                mu[b.id] = b.v_set
    else:
        mu[case.slack] = case.buses[case.slack].v_set
    return VoltageState(mu, np.zeros(case.n))


def compute_injections_pu(Y: AdmittanceMatrix, v: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Net P, Q injections in per-unit from the rectangular AC equations."""
    if Y.n != v.mu.shape[0]:
        raise ValueError(f"dimension mismatch: Y is {Y.n}, state has {v.mu.shape[0]} buses")
    G, B = Y.G, Y.B
    mu, om = v.mu, v.omega
    g_mu, g_om, b_mu, b_om = G @ mu, G @ om, B @ mu, B @ om
    p = mu * (g_mu - b_om) + om * (g_om + b_mu)
    q = om * (g_mu - b_om) - mu * (g_om + b_mu)
    return p, q


def compute_injections(Y: AdmittanceMatrix, v: VoltageState) -> tuple[np.ndarray, np.ndarray]:
    """Net P (MW) and Q (MVAR) injections at every bus."""
    p, q = compute_injections_pu(Y, v)
    return p * Y.base_mva, q * Y.base_mva


def generation_totals(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus sums of generator P and Q set-points (MW, MVAR)."""
    pg = np.zeros(case.n)
    qg = np.zeros(case.n)
    for g in case.generators:
        pg[g.bus] += g.p_out
        qg[g.bus] += g.q_out
    return pg, qg


def specified_injections(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Scheduled net injections ``P^G - P^D`` and ``Q^G - Q^D`` (MW, MVAR)."""
    pg, qg = generation_totals(case)
    pd = np.array([b.p_demand for b in case.buses])
    qd = np.array([b.q_demand for b in case.buses])
    return pg - pd, qg - qd
