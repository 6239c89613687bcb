"""Optimal power flow on top of the increment encoding.

Generator outputs are not decision variables of their own: at a generator bus
``P_G = P_i(x) + P_D`` follows from the voltages. Box limits become equalities
with binary slack integers ``s = sum_j 2^j a_j`` counted up from the lower
bound (``s+``) and down from the upper bound (``s-``); a pairing term ties the
two together. Mismatch rows are kept only at load buses.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .aqpf import (
    AqpfOptions,
    IncrementEncoding,
    IterationRecord,
    MismatchModel,
    SolveTrace,
    StallError,
    _options_dict,
    decode,
    initial_state,
    injection_polynomials,
    iteration_seed,
    magnitude_polynomial,
    magnitude_weights,
    make_clock,
    next_level,
    mismatch_polynomials,
    numeric_mismatch,
    attempt_partition,
    frozen_steps,
    restart_steps,
    scaled_steps,
    solve_step,
    _finish,
    update_deltas,
)
from .netmodel import (
    AdmittanceMatrix,
    BusKind,
    CaseError,
    NetworkCase,
    VoltageState,
    build_admittance,
    compute_injections,
)
from .pubo import BinaryPolynomial, quadratize

log = logging.getLogger(__name__)

P, Q, V, DELTA = "p", "q", "v", "delta"
DEFAULT_BITS = 5  # default step = range / (2^5 - 1)


class OpfInfeasible(CaseError):
    """The limits admit no dispatch (detected before iterating)."""


class CoverageError(ValueError):
    """A slack integer of the requested width cannot span its box."""

    def __init__(self, message: str, suggested_width: int):
        super().__init__(message)
        self.suggested_width = suggested_width


# -- slack encoding -----------------------------------------------------------

def required_width(span: float, step: float) -> int:
    """Smallest k with ``step * (2^(k+1) - 1) >= span``."""
    if span <= 0:
        return 0
    k = max(0, math.ceil(math.log2(span / step + 1.0)) - 1)
    while step * (2 ** (k + 1) - 1) < span * (1 - 1e-12):
        k += 1
    return k


@dataclass(frozen=True)
class BoxSlack:
    """Both slack integers for one boxed quantity at one bus.

    For ``v`` the box and step apply to the squared magnitude. For ``delta``
    the box is on the angle and only the linearized sign conditions are used.
    A degenerate box carries no bits: the quantity is pinned.
    """

    quantity: str
    bus: int
    lower: float
    upper: float
    step: float
    width: int  # k; the integer has k + 1 bits
    plus_bits: tuple[int, ...]
    minus_bits: tuple[int, ...]

    @property
    def pinned(self) -> bool:
        return not self.plus_bits

    def integer(self, side_bits: Sequence[int]) -> BinaryPolynomial:
        return BinaryPolynomial.affine(0.0, {b: float(2 ** j) for j, b in enumerate(side_bits)})

    def value(self, bits: Sequence[int], side: str = "+") -> float:
        idx = self.plus_bits if side == "+" else self.minus_bits
        s = sum(2 ** j * int(bits[b]) for j, b in enumerate(idx))
        return self.lower + self.step * s if side == "+" else self.upper - self.step * s

    def encode(self, x: float) -> tuple[int, int]:
        """Slack integers placing ``x`` (clipped to the box) on the lattice."""
        if self.pinned:
            return 0, 0
        top = 2 ** (self.width + 1) - 1
        x = min(max(x, self.lower), self.upper)
        sp = int(min(top, round((x - self.lower) / self.step)))
        sm = int(min(top, round((self.upper - x) / self.step)))
        return sp, sm

    @property
    def tolerance(self) -> float:
        # half a lattice step, and never below 0.1 MW/MVAR
        floor = 0.1 if self.quantity in (P, Q) else 0.0
        return max(self.step / 2, floor)


@dataclass(frozen=True)
class SlackEncoding:
    num_voltage_vars: int
    boxes: tuple[BoxSlack, ...]

    @property
    def num_slack(self) -> int:
        return sum(len(b.plus_bits) + len(b.minus_bits) for b in self.boxes)

    @property
    def num_vars(self) -> int:
        return self.num_voltage_vars + self.num_slack

    def box(self, quantity: str, bus: int) -> BoxSlack:
        for b in self.boxes:
            if b.quantity == quantity and b.bus == bus:
                return b
        raise KeyError((quantity, bus))

    def of(self, quantity: str) -> list[BoxSlack]:
        return [b for b in self.boxes if b.quantity == quantity]


def generator_boxes(case: NetworkCase) -> dict[int, dict]:
    """Per generator bus: summed P/Q limits and the units behind them."""
    out: dict[int, dict] = {}
    for g in case.generators:
        d = out.setdefault(g.bus, {"p": [0.0, 0.0], "q": [0.0, 0.0], "units": []})
        d["p"][0] += g.p_min
        d["p"][1] += g.p_max
        d["q"][0] += g.q_min
        d["q"][1] += g.q_max
        d["units"].append(g)
    return out


def angle_box_active(lo: float, hi: float) -> bool:
    return not (lo <= -180.0 and hi >= 180.0)


def encode_generation(case: NetworkCase, steps: dict[str, float] | None = None,
                      widths: dict[str, int] | None = None, *, offset: int | None = None,
                      families: Iterable[str] = (P, Q, V, DELTA),
                      bus_filter: Iterable[int] | None = None) -> SlackEncoding:
    """Allocate slack bits for every active box, after the voltage-increment bits.

    ``steps`` fixes the lattice step per quantity (MW, MVAR, p.u. magnitude,
    degrees); by default each box gets ``range / 31``, with floors of 0.005 p.u.
    and 0.5 degrees. ``widths`` fixes k per quantity and raises
    :class:`CoverageError` if the box is not covered. ``bus_filter`` limits the
    bus-level boxes (V, delta) to the given buses.
    """
    allowed = None if bus_filter is None else set(bus_filter)
    steps = steps or {}
    widths = widths or {}
    fams = set(families)
    offset = 4 * len(case.non_slack) if offset is None else offset
    nxt = offset
    boxes: list[BoxSlack] = []

    def add(quantity: str, bus: int, lo: float, hi: float, step: float | None, floor: float = 0.0,
            square: bool = False):
        nonlocal nxt
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError(f"{quantity} box at bus {bus} is not finite")
        span = hi - lo
        if span <= 1e-12:
            lo2, hi2 = (lo * lo, hi * hi) if square else (lo, hi)
            boxes.append(BoxSlack(quantity, bus, lo2, hi2, step or floor, 0, (), ()))
            return
        if step is None:
            step = max(span / (2 ** DEFAULT_BITS - 1), floor)
        if not step > 0:
            raise ValueError(f"{quantity} step must be positive")
        if square:
            # the box is applied to |V|^2; convert a magnitude step at the box centre
            mid = 0.5 * (lo + hi)
            lo, hi, step = lo * lo, hi * hi, 2 * mid * step
            span = hi - lo
        if span <= 1e-12:
            boxes.append(BoxSlack(quantity, bus, lo, hi, step, 0, (), ()))
            return
        need = required_width(span, step)
        k = widths.get(quantity, need)
        if k < need:
            raise CoverageError(
                f"{quantity} box at bus {bus} spans {span:g} but step {step:g} with k={k} covers "
                f"{step * (2 ** (k + 1) - 1):g}; use k >= {need}", need)
        plus = tuple(range(nxt, nxt + k + 1))
        minus = tuple(range(nxt + k + 1, nxt + 2 * (k + 1)))
        nxt += 2 * (k + 1)
        boxes.append(BoxSlack(quantity, bus, lo, hi, step, k, plus, minus))

    for bus, d in sorted(generator_boxes(case).items()):
        if P in fams:
            add(P, bus, *d["p"], steps.get(P))
        if Q in fams:
            add(Q, bus, *d["q"], steps.get(Q))
    for b in case.buses:
        if b.kind is BusKind.SLACK or (allowed is not None and b.id not in allowed):
            continue
        if V in fams:
            add(V, b.id, b.v_min, b.v_max, steps.get(V), floor=0.005, square=True)
        if DELTA in fams and angle_box_active(b.delta_min, b.delta_max):
            add(DELTA, b.id, b.delta_min, b.delta_max, steps.get(DELTA), floor=0.5)
    return SlackEncoding(offset, tuple(boxes))


# -- weights ------------------------------------------------------------------

@dataclass(frozen=True)
class PenaltyWeights:
    lambda_pf: float = 1.0
    lambda_p: float = 10.0  # lower and upper side
    lambda_q: float = 10.0
    lambda_v: float = 10.0
    lambda_delta: float = 10.0
    pair_p: float = 10.0
    pair_q: float = 10.0
    pair_v: float = 10.0
    pair_delta: float = 10.0
    lambda_cost: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")

    def side(self, quantity: str) -> float:
        return getattr(self, f"lambda_{quantity}")

    def pair(self, quantity: str) -> float:
        return getattr(self, f"pair_{quantity}")


# -- constraint quantities ------------------------------------------------------

def quantity_scales(case: NetworkCase, Y: AdmittanceMatrix) -> dict[str, np.ndarray]:
    """Factors bringing each constrained quantity to MW-like units."""
    mw = np.ones(case.n)
    vw = magnitude_weights(Y)
    aw = Y.base_mva * np.abs(Y.matrix.diagonal().imag)
    return {P: mw, Q: mw, V: vw, DELTA: aw}


def quantity_polynomials(case: NetworkCase, Y: AdmittanceMatrix, venc: IncrementEncoding,
                         state: VoltageState, boxes: Sequence[BoxSlack]) -> dict[tuple[str, int], object]:
    """Constrained quantities as polynomials in the voltage bits.

    P/Q are generator outputs (MW/MVAR), V is ``|V|^2``. An active angle box
    yields a pair ``(lower_expr, upper_expr)`` of expressions that must be >= 0.
    """
    gen_buses = sorted({b.bus for b in boxes if b.quantity in (P, Q)})
    Pi, Qi = injection_polynomials(Y, venc, state, gen_buses) if gen_buses else ({}, {})
    out: dict[tuple[str, int], object] = {}
    for b in boxes:
        bus = case.buses[b.bus]
        if b.quantity == P:
            out[(P, b.bus)] = Pi[b.bus] + bus.p_demand
        elif b.quantity == Q:
            out[(Q, b.bus)] = Qi[b.bus] + bus.q_demand
        elif b.quantity == V:
            out[(V, b.bus)] = magnitude_polynomial(venc, state, b.bus)
        else:
            mu, om = _voltage_polys(venc, state, b.bus)
            lo, hi = math.radians(b.lower), math.radians(b.upper)
            # delta >= lo  <=>  omega cos(lo) - mu sin(lo) >= 0 ; delta <= hi  <=>  mu sin(hi) - omega cos(hi) >= 0
            out[(DELTA, b.bus)] = (om.scale(math.cos(lo)) - mu.scale(math.sin(lo)),
                                   mu.scale(math.sin(hi)) - om.scale(math.cos(hi)))
    return out


def _voltage_polys(venc: IncrementEncoding, state: VoltageState, bus: int):
    if bus in venc.buses:
        b = 4 * venc.position(bus)
        dm, do = float(state.d_mu[bus]), float(state.d_omega[bus])
        mu = BinaryPolynomial.affine(float(state.mu[bus]), {b: dm, b + 1: -dm})
        om = BinaryPolynomial.affine(float(state.omega[bus]), {b + 2: do, b + 3: -do})
    else:
        mu = BinaryPolynomial.constant(float(state.mu[bus]))
        om = BinaryPolynomial.constant(float(state.omega[bus]))
    return mu, om


def numeric_quantities(case: NetworkCase, Y: AdmittanceMatrix, v: VoltageState) -> dict[str, np.ndarray]:
    p, q = compute_injections(Y, v)
    pd = np.array([b.p_demand for b in case.buses])
    qd = np.array([b.q_demand for b in case.buses])
    return {P: p + pd, Q: q + qd, V: v.mu ** 2 + v.omega ** 2, DELTA: v.angle_deg}


def box_violations(case: NetworkCase, senc: SlackEncoding, Y: AdmittanceMatrix,
                   v: VoltageState) -> dict[tuple[str, int], float]:
    """Distance outside each box in the quantity's own units (0 when inside)."""
    vals = numeric_quantities(case, Y, v)
    out = {}
    for b in senc.boxes:
        x = vals[b.quantity][b.bus]
        out[(b.quantity, b.bus)] = float(max(b.lower - x, x - b.upper, 0.0))
    return out


# -- Hamiltonians -------------------------------------------------------------

def build_constraint_hamiltonian(case: NetworkCase, senc: SlackEncoding, weights: PenaltyWeights,
                                 state: VoltageState, *, Y: AdmittanceMatrix | None = None,
                                 venc: IncrementEncoding | None = None, literal_pairing: bool = False,
                                 scale: float = 1.0) -> BinaryPolynomial:
    """Lower-side, upper-side and pairing penalties for every box.

    With ``literal_pairing`` the pairing term uses ``- step * s-`` instead of
    ``+ step * s-``; that form vanishes only at the upper limit and is kept
    for comparison.
    """
    Y = Y or build_admittance(case)
    venc = venc or IncrementEncoding.for_case(case)
    polys = quantity_polynomials(case, Y, venc, state, senc.boxes)
    scales = quantity_scales(case, Y)
    H = BinaryPolynomial.constant(0.0, senc.num_vars)
    for b in senc.boxes:
        # a pinned box has no lattice to wash out, so it keeps its full weight
        w = 1.0 if b.pinned else scale
        w_side = w * weights.side(b.quantity) * scales[b.quantity][b.bus] ** 2
        w_pair = w * weights.pair(b.quantity) * scales[b.quantity][b.bus] ** 2
        x = polys[(b.quantity, b.bus)]
        sp = b.integer(b.plus_bits).scale(b.step)
        sm = b.integer(b.minus_bits).scale(b.step)
        if b.quantity == DELTA:
            lo_expr, hi_expr = x
            k_top = float(2 ** (b.width + 1) - 1) * b.step
            # one-sided: expression equals a nonnegative slack scaled into its range
            H.add_inplace((lo_expr - _unit(sp, k_top)).square(), w_side)
            H.add_inplace((hi_expr - _unit(sm, k_top)).square(), w_side)
            continue
        H.add_inplace((x - b.lower - sp).square(), w_side)
        H.add_inplace((b.upper - x - sm).square(), w_side)
        if not b.pinned:
            pair = (sp - sm) if literal_pairing else (sp + sm)
            H.add_inplace((pair + (b.lower - b.upper)).square(), w_pair)
    return H


def _unit(slack: BinaryPolynomial, top: float) -> BinaryPolynomial:
    # map a slack in [0, top] degrees to [0, 2] in the sine-scaled expression
    return slack.scale(2.0 / top) if top > 0 else slack


def cost_value(gen: dict, p_total: float) -> float:
    """Bus cost with output shared among units in proportion to their P_max."""
    units = gen["units"]
    cap = sum(max(g.p_max, 0.0) for g in units) or float(len(units))
    total = 0.0
    for g in units:
        share = (max(g.p_max, 0.0) / cap) if cap else 1.0 / len(units)
        c2, c1, c0 = g.cost_coeffs
        p = p_total * share
        total += c2 * p * p + c1 * p + c0
    return total


def _cost_polynomial(gen: dict, p: BinaryPolynomial) -> BinaryPolynomial:
    units = gen["units"]
    cap = sum(max(g.p_max, 0.0) for g in units) or float(len(units))
    out = BinaryPolynomial.constant(0.0)
    for g in units:
        share = (max(g.p_max, 0.0) / cap) if cap else 1.0 / len(units)
        c2, c1, c0 = g.cost_coeffs
        pg = p.scale(share)
        term = pg.scale(c1) + c0
        if c2:
            term = term + (pg * pg).scale(c2)
        out = out + term
    return out


def build_cost_hamiltonian(case: NetworkCase, senc: SlackEncoding, weights: PenaltyWeights, *,
                           squared: bool = True, scale: float = 1.0) -> BinaryPolynomial:
    """``lambda_cost * sum_k f_k(P_k)^2`` with ``P_k = lower + step * s+``.

    ``squared=False`` gives the plain ``sum_k f_k(P_k)``.
    """
    gens = generator_boxes(case)
    H = BinaryPolynomial.constant(0.0, senc.num_vars)
    for b in senc.of(P):
        p = b.integer(b.plus_bits).scale(b.step) + b.lower
        f = _cost_polynomial(gens[b.bus], p)
        H.add_inplace(f.square() if squared else f, scale * weights.lambda_cost)
    return H


def _cost_array(gen: dict, p: np.ndarray, squared: bool) -> np.ndarray:
    f = sum(_unit_cost(g, p, gen) for g in gen["units"])
    return f * f if squared else f


def _unit_cost(g, p_total, gen):
    units = gen["units"]
    cap = sum(max(u.p_max, 0.0) for u in units) or float(len(units))
    share = (max(g.p_max, 0.0) / cap) if cap else 1.0 / len(units)
    c2, c1, c0 = g.cost_coeffs
    p = p_total * share
    return c2 * p * p + c1 * p + c0


def _box_energy(b: BoxSlack, x: float, w_side: float, w_pair: float, literal_pairing: bool, cost=None) -> float:
    """Minimum over both slack integers of the three box penalties (plus cost on s+)."""
    if b.pinned:
        e = w_side * ((x - b.lower) ** 2 + (b.upper - x) ** 2)
        if cost is not None:
            fn, wc = cost
            e += wc * float(fn(np.array([b.lower]))[0])
        return e
    s = np.arange(2 ** (b.width + 1), dtype=float)
    sp = s[:, None] * b.step
    sm = s[None, :] * b.step
    pair = (sp - sm) if literal_pairing else (sp + sm)
    e = (w_side * (x - b.lower - sp) ** 2 + w_side * (b.upper - x - sm) ** 2
         + w_pair * (pair + b.lower - b.upper) ** 2)
    if cost is not None:
        fn, wc = cost
        e = e + wc * fn(b.lower + sp)
    return float(e.min())


def _angle_box_energy(b: BoxSlack, v: VoltageState, w_side: float) -> float:
    mu, om = float(v.mu[b.bus]), float(v.omega[b.bus])
    lo, hi = math.radians(b.lower), math.radians(b.upper)
    exprs = (om * math.cos(lo) - mu * math.sin(lo), mu * math.sin(hi) - om * math.cos(hi))
    top = float(2 ** (b.width + 1) - 1) * b.step
    grid = np.arange(2 ** (b.width + 1), dtype=float) * b.step * (2.0 / top if top > 0 else 1.0)
    return float(sum(w_side * np.min((e - grid) ** 2) for e in exprs))


def cost_total(case: NetworkCase, p_gen: np.ndarray) -> float:
    gens = generator_boxes(case)
    return float(sum(cost_value(g, p_gen[bus]) for bus, g in gens.items()))


def numeric_cost_term(case: NetworkCase, p_gen: np.ndarray, squared: bool = True) -> float:
    gens = generator_boxes(case)
    vals = [cost_value(g, p_gen[bus]) for bus, g in gens.items()]
    return float(sum(v * v for v in vals) if squared else sum(vals))


# -- outer loop ---------------------------------------------------------------

@dataclass(frozen=True)
class AqopfOptions(AqpfOptions):
    weights: PenaltyWeights = PenaltyWeights()
    families: tuple[str, ...] = (P, Q, V, DELTA)
    steps: dict | None = None
    squared_cost: bool = True
    literal_pairing: bool = False
    cost_share: float = 0.1  # largest cost coefficient vs median mismatch coefficient
    weight_decay: float = -0.1  # constraint and cost weights shrink as exp(rate * it)
    violation_guard: bool = False  # reject steps that raise the box violation while infeasible
    active_limits: bool = True  # full-weight pull back onto any limit the base point violates
    lazy_margin: float | None = 0.02  # p.u.; V/delta boxes encoded only near their limits


def check_feasible(case: NetworkCase) -> None:
    """Reject limits that cannot be met by any dispatch."""
    boxes = generator_boxes(case)
    if not boxes:
        raise OpfInfeasible("case has no generators")
    p_lo = sum(d["p"][0] for d in boxes.values())
    p_hi = sum(d["p"][1] for d in boxes.values())
    demand = sum(b.p_demand for b in case.buses)
    if p_hi < demand:
        raise OpfInfeasible(f"total P_max {p_hi:g} MW is below total demand {demand:g} MW")
    for bus, d in boxes.items():
        if d["p"][0] > d["p"][1] or d["q"][0] > d["q"][1]:
            raise OpfInfeasible(f"inverted generator limits at bus {bus}")
    for b in case.buses:
        if b.v_min > b.v_max:
            raise OpfInfeasible(f"inverted voltage limits at bus {b.id}")


@dataclass
class OpfContext:
    case: NetworkCase
    Y: AdmittanceMatrix
    venc: IncrementEncoding
    senc: SlackEncoding  # every box; used for violations and reporting
    model: MismatchModel
    opts: AqopfOptions
    cost_weight: float = 0.0  # multiplies the cost Hamiltonian; fixed from the starting point

    def active_encoding(self, state: VoltageState) -> SlackEncoding:
        """Boxes encoded this iteration: all P/Q, V/delta only near a limit."""
        o = self.opts
        if o.lazy_margin is None:
            return self.senc
        mag = state.magnitude
        ang = state.angle_deg
        near = []
        for b in self.case.buses:
            m = o.lazy_margin
            if (mag[b.id] <= b.v_min + m or mag[b.id] >= b.v_max - m
                    or ang[b.id] <= b.delta_min + math.degrees(m) or ang[b.id] >= b.delta_max - math.degrees(m)):
                near.append(b.id)
        return encode_generation(self.case, o.steps, offset=self.venc.num_vars, families=o.families,
                                 bus_filter=near)

    def decay(self, it: int) -> float:
        return math.exp(self.opts.weight_decay * it)

    def active_set(self, v: VoltageState) -> tuple[tuple[BoxSlack, float], ...]:
        """Boxes that ``v`` lies outside of, with the violated bound."""
        if not self.opts.active_limits:
            return ()
        vals = numeric_quantities(self.case, self.Y, v)
        out = []
        for b in self.senc.boxes:
            if b.pinned or b.quantity == DELTA:
                continue
            x = vals[b.quantity][b.bus]
            if x > b.upper:
                out.append((b, b.upper))
            elif x < b.lower:
                out.append((b, b.lower))
        return tuple(out)

    def _limit_weight(self, b: BoxSlack) -> float:
        return self.opts.weights.side(b.quantity) * quantity_scales(self.case, self.Y)[b.quantity][b.bus] ** 2

    def hamiltonian(self, state: VoltageState, it: int, excluded: Iterable[int] = (),
                    senc: SlackEncoding | None = None,
                    active: Sequence[tuple[BoxSlack, float]] = ()) -> BinaryPolynomial:
        o = self.opts
        senc = senc or self.senc
        n = senc.num_vars
        model = self.model.restricted(excluded)
        H_obj = BinaryPolynomial.constant(0.0, n)
        for row in mismatch_polynomials(model, self.Y, self.venc, state):
            H_obj.add_inplace(row.square())
        w = self.decay(it)
        H = BinaryPolynomial.constant(0.0, n)
        H.add_inplace(H_obj, o.weights.lambda_pf)
        H.add_inplace(build_constraint_hamiltonian(self.case, senc, o.weights, state, Y=self.Y,
                                                   venc=self.venc, literal_pairing=o.literal_pairing, scale=w))
        H_cost = build_cost_hamiltonian(self.case, senc, o.weights, squared=o.squared_cost)
        H.add_inplace(H_cost, w * self.cost_weight)
        if active:
            polys = quantity_polynomials(self.case, self.Y, self.venc, state, [b for b, _ in active])
            for b, bound in active:
                H.add_inplace((polys[(b.quantity, b.bus)] - bound).square(), self._limit_weight(b))
        if H.degree > 4:
            raise AssertionError(f"Hamiltonian degree {H.degree} > 4")
        return H

    @staticmethod
    def cost_scale(opts, H_obj: BinaryPolynomial, H_cost: BinaryPolynomial) -> float:
        obj = np.abs([c for m, c in H_obj.terms.items() if m])
        cost = np.abs([c for m, c in H_cost.terms.items() if m])
        if obj.size == 0 or cost.size == 0 or cost.max() == 0:
            return 0.0
        return opts.cost_share * opts.weights.lambda_pf * float(np.median(obj)) / float(cost.max())

    def energy(self, v: VoltageState, it: int, senc: SlackEncoding,
               active: Sequence[tuple[BoxSlack, float]] = ()) -> tuple[float, dict]:
        """The combined Hamiltonian at voltages ``v`` with every slack integer at its best value."""
        o = self.opts
        mm = numeric_mismatch(self.model, self.Y, v)
        vals = numeric_quantities(self.case, self.Y, v)
        scales = quantity_scales(self.case, self.Y)
        gens = generator_boxes(self.case)
        w = self.decay(it)
        total = o.weights.lambda_pf * mm.sum_squares
        for b in senc.boxes:
            sc2 = scales[b.quantity][b.bus] ** 2
            wc = 1.0 if b.pinned else w
            w_side = wc * o.weights.side(b.quantity) * sc2
            w_pair = wc * o.weights.pair(b.quantity) * sc2
            if b.quantity == DELTA:
                total += _angle_box_energy(b, v, w_side)
                continue
            x = float(vals[b.quantity][b.bus])
            cost = None
            if b.quantity == P:
                cost = (lambda p, g=gens[b.bus]: _cost_array(g, p, o.squared_cost)), w * self.cost_weight
            total += _box_energy(b, x, w_side, w_pair, o.literal_pairing, cost)
        for b, bound in active:
            total += self._limit_weight(b) * (float(vals[b.quantity][b.bus]) - bound) ** 2
        viol = box_violations(self.case, self.senc, self.Y, v)
        vq = sum((scales[q][bus] * x) ** 2 for (q, bus), x in viol.items())
        return total, {"mismatch": mm, "violations": viol, "violation_sq": vq}

    def feasible(self, viol: dict) -> bool:
        return all(viol[(b.quantity, b.bus)] <= b.tolerance for b in self.senc.boxes)


@dataclass
class DispatchReport:
    p_gen: dict[int, float]  # MW per generator bus (internal index)
    q_gen: dict[int, float]
    cost: float  # $/h, sum of f_k
    violations: dict[str, float]  # excursions beyond the box tolerance
    max_violation: float
    slack_decoded: dict[int, float] = field(default_factory=dict)
    excursions: dict[str, float] = field(default_factory=dict)  # every excursion, however small

    def to_dict(self) -> dict:
        return {"p_gen": {str(k): v for k, v in self.p_gen.items()},
                "q_gen": {str(k): v for k, v in self.q_gen.items()},
                "cost": self.cost, "violations": self.violations, "max_violation": self.max_violation,
                "excursions": self.excursions,
                "slack_decoded": {str(k): v for k, v in self.slack_decoded.items()}}


def dispatch_report(ctx: OpfContext, v: VoltageState, bits: Sequence[int] | None = None,
                    senc: SlackEncoding | None = None) -> DispatchReport:
    vals = numeric_quantities(ctx.case, ctx.Y, v)
    gens = sorted(generator_boxes(ctx.case))
    viol = box_violations(ctx.case, ctx.senc, ctx.Y, v)
    tol = {(b.quantity, b.bus): b.tolerance for b in ctx.senc.boxes}
    decoded = {}
    if bits is not None:
        decoded = {b.bus: b.value(bits, "+") for b in (senc or ctx.senc).of(P)}
    return DispatchReport(
        p_gen={g: float(vals[P][g]) for g in gens},
        q_gen={g: float(vals[Q][g]) for g in gens},
        cost=cost_total(ctx.case, vals[P]),
        violations={f"{q}@{b}": x for (q, b), x in viol.items() if x > tol[(q, b)]},
        max_violation=max(viol.values(), default=0.0),
        slack_decoded=decoded,
        excursions={f"{q}@{b}": x for (q, b), x in viol.items() if x > 0},
    )


def opf_variable_counts(case: NetworkCase, options: AqopfOptions | None = None) -> dict:
    opts = options or AqopfOptions()
    ctx = _context(case, opts)
    state = initial_state(case, opts)
    ctx.cost_weight = _initial_cost_weight(ctx, state)
    senc = ctx.active_encoding(state)
    H = ctx.hamiltonian(state, 0, senc=senc)
    _, rmap = quadratize(H, opts.lam, num_vars=senc.num_vars)
    return {"base": ctx.venc.num_vars, "slack": senc.num_slack, "auxiliary": rmap.num_aux,
            "total": senc.num_vars + rmap.num_aux}


def _initial_cost_weight(ctx: OpfContext, state: VoltageState) -> float:
    """Scale the cost so its largest coefficient is ``cost_share`` of a typical mismatch coefficient."""
    H_obj = BinaryPolynomial.constant(0.0, ctx.senc.num_vars)
    for row in mismatch_polynomials(ctx.model, ctx.Y, ctx.venc, state):
        H_obj.add_inplace(row.square())
    o = ctx.opts
    H_cost = build_cost_hamiltonian(ctx.case, ctx.senc, o.weights, squared=o.squared_cost)
    return OpfContext.cost_scale(o, H_obj, H_cost)


def _context(case: NetworkCase, opts: AqopfOptions) -> OpfContext:
    check_feasible(case)
    Y = build_admittance(case)
    venc = IncrementEncoding.for_case(case)
    senc = encode_generation(case, opts.steps, offset=venc.num_vars, families=opts.families)
    pq = tuple(case.indices(BusKind.PQ))
    base = MismatchModel.for_pf(case, Y)
    model = replace(base, p_rows=pq, q_rows=pq, v_rows=())
    return OpfContext(case, Y, venc, senc, model, opts)


def run_aqopf(case: NetworkCase, options: AqopfOptions | None = None) -> SolveTrace:
    """Iterate the combined PF, constraint and cost Hamiltonian.

    Converged means the load-bus residual is at most epsilon and every box
    holds within its tolerance.
    """
    opts = options or AqopfOptions()
    ctx = _context(case, opts)
    venc, senc = ctx.venc, ctx.senc
    state = initial_state(case, opts)

    ctx.cost_weight = _initial_cost_weight(ctx, state)
    senc0 = ctx.active_encoding(state)
    _, info = ctx.energy(state, 0, senc0)
    residual = info["mismatch"].residual
    done = info["mismatch"].within(opts.epsilon, opts.stop_each) and ctx.feasible(info["violations"])
    trace = SolveTrace(case.name, "aqopf", [], state, done, residual,
                       counts={"base": venc.num_vars, "slack": senc.num_slack}, options=_options_dict(opts))
    history: list[np.ndarray] = []
    clock = make_clock(opts, residual)
    stalls = 0
    level = 0
    it = 0
    last_bits = None
    last_senc = senc
    max_slack = 0
    while not done and it < opts.it_max:
        trial = scaled_steps(state, level)
        accepted = False
        retries = 0
        t_build = t_quad = t_anneal = 0.0
        t_u0 = time.perf_counter()
        senc_it = ctx.active_encoding(state)
        max_slack = max(max_slack, senc_it.num_slack)
        active = ctx.active_set(state)
        base_energy, base_info = ctx.energy(state, it, senc_it, active)
        for attempt in range(opts.max_retries + 1):
            excluded = attempt_partition(case, opts, it, attempt)
            step = frozen_steps(trial, excluded) if opts.partition_freeze else trial
            out = solve_step(lambda: ctx.hamiltonian(step, it, excluded, senc_it, active), senc_it.num_vars, opts,
                             iteration_seed(opts.seed, it, attempt))
            t_build += out.t_build
            t_quad += out.t_quadratize
            t_anneal += out.t_anneal
            t_u0 = time.perf_counter()
            cand = decode(venc, step, out.bits)
            cand_energy, cand_info = ctx.energy(cand, it, senc_it, active)
            moved = any(np.any(m) for m in venc.moves(out.bits))
            guard = not opts.violation_guard or ctx.feasible(cand_info["violations"]) or \
                cand_info["violation_sq"] <= base_info["violation_sq"] * (1 + 1e-12)
            if moved and guard and cand_energy <= base_energy:
                accepted = True
                break
            log.debug("aqopf %s it=%d attempt=%d rejected: moved=%s guard=%s dE=%.4g", case.name, it, attempt,
                      moved, guard, cand_energy - base_energy)
            retries += 1
            trial = trial.with_steps(trial.d_mu / 2, trial.d_omega / 2)
        if accepted:
            vbits = out.bits[: venc.num_vars]
            last_bits = out.bits
            last_senc = senc_it
            info = cand_info
            new_mu, new_om = cand.mu, cand.omega
            stalls = 0
            level = next_level(level, retries, opts)
        else:
            vbits = np.zeros(venc.num_vars, dtype=np.int8)
            new_mu, new_om = state.mu, state.omega
            info = base_info
            stalls += 1
            level = next_level(level, retries, opts)
        history.append(vbits)
        d_mu, d_om = update_deltas(history[-3:], state.d_mu, state.d_omega, clock.local(it), venc, opts.bounds)
        state = VoltageState(new_mu, new_om, d_mu, d_om)
        residual = info["mismatch"].residual
        feasible = ctx.feasible(info["violations"])
        done = info["mismatch"].within(opts.epsilon, opts.stop_each) and feasible
        restarted = not done and clock.observe(it, residual)
        if restarted:
            history.clear()
            level = 0
            state = restart_steps(state, venc, opts)
        t_update = time.perf_counter() - t_u0
        trace.records.append(IterationRecord(
            it=it, residual=residual, sum_squares=info["mismatch"].sum_squares, energy=out.energy,
            accepted=accepted, retries=retries, aux_violations=out.violations, num_vars=out.num_vars,
            num_aux=out.num_aux, excluded=sorted(excluded), d_mu=state.d_mu.tolist(), d_omega=state.d_omega.tolist(),
            t_build=t_build, t_quadratize=t_quad, t_anneal=t_anneal, t_update=t_update,
            extra={"max_violation": max(info["violations"].values(), default=0.0), "feasible": feasible,
                   "restart": restarted, "level": level}))
        log.debug("aqopf %s it=%d residual=%.4e feasible=%s accepted=%s", case.name, it, residual, feasible, accepted)
        it += 1
        trace.state = state
        if stalls >= opts.stall_limit and not done:
            trace.converged = False
            _finish_opf(trace, ctx, last_bits, last_senc, max_slack)
            raise StallError(f"no improving update in {stalls} consecutive iterations "
                             f"(residual {residual:.4e})", trace)
    trace.state = state
    trace.converged = done
    _finish_opf(trace, ctx, last_bits, last_senc, max_slack)
    return trace


def _finish_opf(trace: SolveTrace, ctx: OpfContext, bits, senc: SlackEncoding, max_slack: int) -> None:
    _finish(trace, ctx.venc)
    trace.counts["slack"] = max_slack
    rep = dispatch_report(ctx, trace.state, bits, senc)
    trace.summary["dispatch"] = rep.to_dict()
    trace.summary["cost"] = rep.cost
