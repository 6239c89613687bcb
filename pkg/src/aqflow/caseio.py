"""Case ingestion (MATPOWER subset, ``gridcase-v1`` JSON) and scenario perturbation."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, replace
from typing import Any, Iterable, Sequence

from .netmodel import Branch, Bus, BusKind, CaseError, Generator, NetworkCase, validate_case

__all__ = [
    "NetworkCase",
    "ParseError",
    "PerturbationSpec",
    "apply_perturbation",
    "load_case",
    "load_json",
    "parse_matpower",
    "save_json",
]

SCHEMA = "gridcase-v1"


class ParseError(CaseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_MATRIX_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[", re.M)
_SCALAR_RE = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;", re.M)
_NAME_RE = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)", re.M)

_BUS_KIND = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _read_matrices(text: str) -> dict[str, tuple[int, list[list[float]]]]:
    """Return ``{name: (line_no, rows)}`` for every ``mpc.<name> = [ ... ];`` block."""
    out = {}
    for m in _MATRIX_RE.finditer(text):
        name = m.group(1)
        start_line = text.count("\n", 0, m.start()) + 1
        end = text.find("];", m.end())
        if end < 0:
            raise ParseError(f"unterminated matrix mpc.{name}", start_line)
        body = text[m.end():end]
        rows = []
        for k, raw in enumerate(body.split("\n")):
            line_no = start_line + k
            line = raw.split("%", 1)[0]
            for chunk in line.split(";"):
                toks = chunk.replace(",", " ").split()
                if not toks:
                    continue
                try:
                    rows.append([float(t) for t in toks])
                except ValueError as exc:
                    raise ParseError(f"mpc.{name}: bad number ({exc})", line_no) from None
        out[name] = (start_line, rows)
    return out


def parse_matpower(text: str, name: str | None = None) -> NetworkCase:
    """Parse the bus/gen/branch/gencost subset of a MATPOWER version-2 case file."""
    mats = _read_matrices(text)
    for req in ("bus", "gen", "branch"):
        if req not in mats:
            last = text.count("\n") + 1
            raise ParseError(f"missing mandatory matrix mpc.{req}", last)
    m = _SCALAR_RE.search(text)
    base = float(m.group(1)) if m else 100.0
    if name is None:
        nm = _NAME_RE.search(text)
        name = nm.group(1) if nm else "case"

    bus_line, bus_rows = mats["bus"]
    gen_line, gen_rows = mats["gen"]
    br_line, br_rows = mats["branch"]

    id_map: dict[int, int] = {}
    raw_buses = []
    for k, row in enumerate(bus_rows):
        if len(row) < 13:
            raise ParseError(f"mpc.bus row {k + 1} has {len(row)} columns, need 13", bus_line + k + 1)
        ext, btype = int(row[0]), int(row[1])
        if btype not in _BUS_KIND:
            raise CaseError(f"bus {ext}: unsupported bus type {btype}")
        if ext in id_map:
            raise CaseError(f"duplicate bus id {ext}")
        id_map[ext] = len(id_map)
        raw_buses.append(row)

    gens = []
    vset: dict[int, float] = {}
    for k, row in enumerate(gen_rows):
        if len(row) < 10:
            raise ParseError(f"mpc.gen row {k + 1} has {len(row)} columns, need 10", gen_line + k + 1)
        if row[7] <= 0:
            continue
        ext = int(row[0])
        if ext not in id_map:
            raise CaseError(f"generator {k + 1}: bus {ext} does not resolve")
        bus = id_map[ext]
        vset.setdefault(bus, row[5])
        gens.append(
            Generator(bus=bus, p_out=row[1], q_out=row[2], q_max=row[3], q_min=row[4],
                      v_set=row[5], p_max=row[8], p_min=row[9])
        )
    gen_in_service = [row for row in gen_rows if row[7] > 0]

    if "gencost" in mats:
        gc_line, gc_rows = mats["gencost"]
        if len(gc_rows) < len(gen_rows):
            raise ParseError("mpc.gencost has fewer rows than mpc.gen", gc_line)
        costs = []
        for k, row in enumerate(gc_rows[:len(gen_rows)]):
            if int(row[0]) != 2:
                raise ParseError(f"unsupported cost model {int(row[0])} (only polynomial, model 2)",
                                 gc_line + k + 1)
            ncoef = int(row[3])
            coefs = row[4:4 + ncoef]
            if len(coefs) != ncoef:
                raise ParseError("gencost row shorter than its declared coefficient count", gc_line + k + 1)
            if ncoef > 3 and any(coefs[: ncoef - 3]):
                raise ParseError("unsupported cost model: polynomial above quadratic", gc_line + k + 1)
            c = ([0.0, 0.0, 0.0] + list(coefs))[-3:]
            costs.append(tuple(c))
        costs = [c for c, row in zip(costs, gen_rows) if row[7] > 0]
        gens = [replace(g, cost_coeffs=c) for g, c in zip(gens, costs)]
    else:
        gens = [replace(g, cost_defaulted=True) for g in gens]
    assert len(gens) == len(gen_in_service)

    buses = []
    for row in raw_buses:
        pos = id_map[int(row[0])]
        kind = _BUS_KIND[int(row[1])]
        buses.append(Bus(
            id=pos, kind=kind, p_demand=row[2], q_demand=row[3], g_shunt=row[4], b_shunt=row[5],
            v_set=vset.get(pos, row[7]) if kind is not BusKind.PQ else row[7],
            v_max=row[11], v_min=row[12], ext_id=int(row[0]),
        ))

    branches = []
    circuits: dict[tuple[int, int], int] = {}
    for k, row in enumerate(br_rows):
        if len(row) < 11:
            raise ParseError(f"mpc.branch row {k + 1} has {len(row)} columns, need 11", br_line + k + 1)
        if row[10] <= 0:
            continue
        f_ext, t_ext = int(row[0]), int(row[1])
        for e in (f_ext, t_ext):
            if e not in id_map:
                raise CaseError(f"branch {k + 1}: endpoint {e} does not resolve to a bus")
        f, t = id_map[f_ext], id_map[t_ext]
        key = (min(f, t), max(f, t))
        circuits[key] = circuits.get(key, 0) + 1
        branches.append(Branch(
            from_bus=f, to_bus=t, r=row[2], x=row[3], b_shunt=row[4],
            tap_ratio=row[8] if row[8] != 0 else 1.0, shift_deg=row[9], circuit=circuits[key],
        ))

    case = NetworkCase(name=name, mva_base=base, buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens))
    validate_case(case)
    return case


# -- JSON ---------------------------------------------------------------------

def _case_to_dict(case: NetworkCase) -> dict[str, Any]:
    buses = []
    for b in case.buses:
        d = asdict(b)
        d["kind"] = b.kind.value
        buses.append(d)
    gens = []
    for g in case.generators:
        d = asdict(g)
        d["cost_coeffs"] = list(g.cost_coeffs)
        gens.append(d)
    return {
        "schema": SCHEMA,
        "name": case.name,
        "mva_base": case.mva_base,
        "buses": buses,
        "branches": [asdict(br) for br in case.branches],
        "generators": gens,
    }


def save_json(case: NetworkCase, indent: int | None = 2) -> str:
    return json.dumps(_case_to_dict(case), indent=indent)


def _fields(obj: Any, path: str, required: Iterable[str], allowed: Iterable[str]) -> dict:
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: expected an object")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ParseError(f"{path}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ParseError(f"{path}: unknown field(s) {', '.join(extra)}")
    return obj


def _num(obj: dict, key: str, path: str) -> float:
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"{path}.{key}: expected a number, got {type(val).__name__}")
    return float(val)


def load_json(text: str) -> NetworkCase:
    """Load a ``gridcase-v1`` document; errors carry a JSON path."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", exc.lineno) from None
    _fields(doc, "$", ("schema", "name", "mva_base", "buses", "branches"),
            ("schema", "name", "mva_base", "buses", "branches", "generators"))
    if doc["schema"] != SCHEMA:
        raise ParseError(f"$.schema: expected {SCHEMA!r}, got {doc['schema']!r}")
    if not isinstance(doc["buses"], list) or not doc["buses"]:
        raise ParseError("$.buses: must be a non-empty list")

    bus_fields = Bus.__dataclass_fields__
    buses = []
    for k, raw in enumerate(doc["buses"]):
        path = f"$.buses[{k}]"
        _fields(raw, path, ("id", "kind"), bus_fields)
        try:
            kind = BusKind(raw["kind"])
        except ValueError:
            raise ParseError(f"{path}.kind: unknown bus kind {raw['kind']!r}") from None
        kw = {f: _num(raw, f, path) for f in raw if f not in ("id", "kind", "ext_id")}
        ext = raw.get("ext_id")
        buses.append(Bus(id=int(raw["id"]), kind=kind, ext_id=None if ext is None else int(ext), **kw))

    branches = []
    for k, raw in enumerate(doc["branches"]):
        path = f"$.branches[{k}]"
        _fields(raw, path, ("from_bus", "to_bus", "r", "x"), Branch.__dataclass_fields__)
        kw = {f: _num(raw, f, path) for f in raw if f not in ("from_bus", "to_bus", "circuit")}
        branches.append(Branch(from_bus=int(raw["from_bus"]), to_bus=int(raw["to_bus"]),
                               circuit=int(raw.get("circuit", 1)), **kw))

    gens = []
    for k, raw in enumerate(doc.get("generators", [])):
        path = f"$.generators[{k}]"
        _fields(raw, path, ("bus",), Generator.__dataclass_fields__)
        kw = {f: _num(raw, f, path) for f in raw
              if f not in ("bus", "cost_coeffs", "cost_defaulted")}
        cc = raw.get("cost_coeffs", [0.0, 1.0, 0.0])
        if not isinstance(cc, list) or len(cc) != 3:
            raise ParseError(f"{path}.cost_coeffs: expected [c2, c1, c0]")
        gens.append(Generator(bus=int(raw["bus"]), cost_coeffs=tuple(float(c) for c in cc),
                              cost_defaulted=bool(raw.get("cost_defaulted", False)), **kw))

    case = NetworkCase(name=str(doc["name"]), mva_base=_num(doc, "mva_base", "$"),
                       buses=tuple(buses), branches=tuple(branches), generators=tuple(gens))
    validate_case(case)
    return case


def load_case(path: str) -> NetworkCase:
    """Load a case from a ``.m`` (MATPOWER) or ``.json`` (gridcase-v1) file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        return load_json(text)
    return parse_matpower(text)


# -- perturbation -------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Scenario description: ``mode`` is ``"load"`` or ``"rx"``.

    ``buses`` (internal ids) select loads to scale in load mode; ``branches``
    (positions in ``case.branches``) select lines whose resistance is scaled
    in rx mode. ``None`` selects every PQ bus / every branch.
    """

    mode: str
    factor: float
    buses: Sequence[int] | None = None
    branches: Sequence[int] | None = None
    r_floor: float = 0.0


def apply_perturbation(case: NetworkCase, spec: PerturbationSpec) -> NetworkCase:
    if not spec.factor > 0:
        raise ValueError("scale factor must be positive")
    if spec.mode == "load":
        targets = spec.buses if spec.buses is not None else case.indices(BusKind.PQ)
        for b in targets:
            if not 0 <= b < case.n:
                raise CaseError(f"bus {b} does not exist")
            if case.buses[b].kind is BusKind.SLACK:
                raise CaseError(f"bus {b} is the slack bus; load scaling is not allowed there")
        sel = set(targets)
        buses = tuple(
            replace(b, p_demand=b.p_demand * spec.factor, q_demand=b.q_demand * spec.factor)
            if b.id in sel else b
            for b in case.buses
        )
        return replace(case, buses=buses)
    if spec.mode == "rx":
        targets = spec.branches if spec.branches is not None else range(len(case.branches))
        sel = set(targets)
        for k in sel:
            if not 0 <= k < len(case.branches):
                raise CaseError(f"branch {k} does not exist")
        branches = tuple(
            replace(br, r=max(br.r, spec.r_floor) * spec.factor) if k in sel else br
            for k, br in enumerate(case.branches)
        )
        return replace(case, branches=branches)
    raise ValueError(f"unknown perturbation mode {spec.mode!r}")
