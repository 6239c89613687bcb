"""Command-line entry point: ``aqflow {pf,opf,perturb,bench}``.

Exit codes: 0 converged, 1 ran but did not converge (report still written),
2 unreadable or invalid input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from typing import Any, Sequence

import numpy as np

from . import __version__
from .aqopf import AqopfOptions, OpfInfeasible, opf_variable_counts, run_aqopf
from .aqpf import AqpfOptions, SolveTrace, StallError, run_aqpf, variable_counts
from .caseio import PerturbationSpec, apply_perturbation, load_case, save_json
from .netmodel import BusKind, CaseError, NetworkCase, VoltageState, build_admittance, compute_injections
from .nrsolver import NrOptions, solve_nr

log = logging.getLogger("aqflow")

REPORT_SCHEMA = "aqflow-report-v1"
EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INPUT = 0, 1, 2
DEFAULT_SEED = 0


# -- reports ------------------------------------------------------------------

def bus_table(case: NetworkCase, v: VoltageState) -> list[dict]:
    p, q = compute_injections(build_admittance(case), v)
    ext = case.ext_ids()
    return [{"id": b.id, "ext_id": ext[b.id], "kind": b.kind.value, "v": float(v.magnitude[b.id]),
             "angle_deg": float(v.angle_deg[b.id]), "p_mw": float(p[b.id]), "q_mvar": float(q[b.id])}
            for b in case.buses]


def mse_against(report: dict, reference: dict) -> dict:
    """Mean squared differences over non-slack buses, matched by bus id."""
    ref = {b["id"]: b for b in reference["buses"]}
    rows = [b for b in report["buses"] if b["kind"] != BusKind.SLACK.value]
    missing = [b["id"] for b in rows if b["id"] not in ref]
    if missing:
        raise CaseError(f"reference report lacks buses {missing}")

    def mse(key: str) -> float:
        return float(np.mean([(b[key] - ref[b["id"]][key]) ** 2 for b in rows])) if rows else 0.0

    return {"p_mw2": mse("p_mw"), "q_mvar2": mse("q_mvar"), "v_pu2": mse("v"), "angle_deg2": mse("angle_deg")}


def _finite(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj


def make_report(case: NetworkCase, solver: str, converged: bool, iterations: int, residual: float,
                residual_units: str, v: VoltageState, timing: dict, config: dict, **extra) -> dict:
    doc = {
        "schema": REPORT_SCHEMA,
        "case": case.name,
        "solver": solver,
        "converged": bool(converged),
        "iterations": int(iterations),
        "residual": float(residual),
        "residual_units": residual_units,
        "buses": bus_table(case, v),
        "timing": timing,
        "config": config,
    }
    doc.update(extra)
    return _finite(doc)


def nr_report(case: NetworkCase, config: dict, max_iter: int = 20) -> dict:
    t0 = time.perf_counter()
    res = solve_nr(case, NrOptions(max_iter=max_iter), strict=False)
    return make_report(case, "nr", res.converged, res.iterations, res.max_mismatch, "p.u. max |mismatch|",
                       res.v, {"total_time": time.perf_counter() - t0}, config,
                       message=res.message, history=list(res.history))


def trace_report(case: NetworkCase, trace: SolveTrace, config: dict, message: str = "") -> dict:
    extra = {"counts": trace.counts, "message": message}
    if "dispatch" in trace.summary:
        extra["dispatch"] = trace.summary["dispatch"]
        extra["cost"] = trace.summary["cost"]
        extra["violation_count"] = len(trace.summary["dispatch"]["violations"])
    timing = {k: trace.summary[k] for k in ("compile_time", "time_per_iteration", "total_time")
              if k in trace.summary}
    return make_report(case, trace.solver, trace.converged, trace.iterations, trace.residual,
                       "(MW^2+MVAR^2)/2", trace.state, timing, config,
                       initial_residual=trace.initial_residual, restarts=trace.summary.get("restarts", 0))


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def write_outputs(report: dict, out: str | None, trace: SolveTrace | None, reference: dict | None,
                  plots: bool, epsilon: float | None) -> None:
    text = json.dumps(report, indent=2)
    if out is None:
        print(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    stem = os.path.splitext(out)[0]
    if trace is not None:
        with open(stem + ".trace.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(trace.to_csv())
    if plots:
        from . import plotting

        if trace is not None:
            plotting.residual_plot({trace.solver: trace.residuals}, stem + ".residual.png", epsilon)
        if reference is not None:
            plotting.bus_comparison_plot(report, reference, stem + ".buses.png")
    log.info("wrote %s", out)


# -- commands -----------------------------------------------------------------

def _load_reference(arg: str | None, case: NetworkCase) -> dict | None:
    if arg is None:
        return None
    if arg == "nr":
        return nr_report(case, {})
    with open(arg, encoding="utf-8") as fh:
        ref = json.load(fh)
    if ref.get("schema") != REPORT_SCHEMA:
        raise CaseError(f"{arg}: not a {REPORT_SCHEMA} report")
    return ref


def _solver_options(args, cls=AqpfOptions, **kw):
    fields = dict(seed=args.seed, epsilon=args.epsilon, it_max=args.max_iter,
                  partition_fraction=args.partition_fraction)
    if args.reads is not None:
        fields["num_reads"] = args.reads
    if args.sweeps is not None:
        fields["sweeps"] = args.sweeps
    fields.update(kw)
    return cls(**fields)


def _config(args, opts) -> dict:
    cfg = {"seed": args.seed, "threads": args.threads, "version": __version__}
    if opts is not None:
        cfg.update(json.loads(json.dumps(_opts_dict(opts), default=str)))
    return cfg


def _opts_dict(opts) -> dict:
    return asdict(opts)


def _run_iterative(case, runner, opts):
    try:
        trace = runner(case, opts)
        message = ""
    except StallError as exc:
        trace, message = exc.trace, str(exc)
    return trace, message


def cmd_pf(args) -> int:
    case = load_case(args.case)
    reference = _load_reference(args.reference, case)
    trace = None
    if args.solver == "nr":
        report = nr_report(case, _config(args, None), args.max_iter or 20)
        epsilon = None
    else:
        opts = _solver_options(args, it_max=args.max_iter or AqpfOptions.it_max)
        trace, message = _run_iterative(case, run_aqpf, opts)
        report = trace_report(case, trace, _config(args, opts), message)
        epsilon = opts.epsilon
    if reference is not None:
        report["mse"] = mse_against(report, reference)
    write_outputs(report, args.out, trace, reference, not args.no_plots, epsilon)
    return EXIT_OK if report["converged"] else EXIT_NOT_CONVERGED


def cmd_opf(args) -> int:
    case = load_case(args.case)
    reference = _load_reference(args.reference, case)
    opts = _solver_options(args, AqopfOptions, it_max=args.max_iter or AqopfOptions.it_max,
                           squared_cost=args.cost_form == "squared")
    try:
        trace, message = _run_iterative(case, run_aqopf, opts)
    except OpfInfeasible as exc:
        print(f"error: infeasible limits: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    report = trace_report(case, trace, _config(args, opts), message)
    report["cost_form"] = args.cost_form
    if reference is not None:
        report["mse"] = mse_against(report, reference)
    write_outputs(report, args.out, trace, reference, not args.no_plots, opts.epsilon)
    return EXIT_OK if report["converged"] else EXIT_NOT_CONVERGED


def _int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(t) for t in text.replace(",", " ").split()]


def cmd_perturb(args) -> int:
    case = load_case(args.case)
    spec = PerturbationSpec(args.mode, args.factor, buses=_int_list(args.buses),
                            branches=_int_list(args.branches), r_floor=args.r_floor)
    out = apply_perturbation(case, spec).with_name(f"{case.name}_{args.mode}x{args.factor:g}")
    text = save_json(out) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


BENCH_COLUMNS = ["case", "solver", "repeat", "seed", "buses", "base", "slack", "auxiliary", "total",
                 "compile_time", "time_per_iteration", "total_time", "iterations", "residual", "converged"]


def bench_rows(paths: Sequence[str], solvers: Sequence[str], repeats: int, seed: int,
               it_max: int | None = None) -> tuple[list[dict], list[tuple]]:
    rows, traces = [], []
    for path in paths:
        case = load_case(path)
        for solver in solvers:
            for rep in range(repeats):
                s = seed + rep
                row = {"case": case.name, "solver": solver, "repeat": rep, "seed": s, "buses": case.n}
                if solver == "nr":
                    t0 = time.perf_counter()
                    res = solve_nr(case, strict=False)
                    row.update(base=None, slack=None, auxiliary=None, total=None, compile_time=None,
                               time_per_iteration=None, total_time=time.perf_counter() - t0,
                               iterations=res.iterations, residual=res.max_mismatch, converged=res.converged)
                    traces += [(case.name, k, r, solver, rep) for k, r in enumerate(res.history)]
                else:
                    if solver == "aqpf":
                        opts = AqpfOptions(seed=s) if it_max is None else AqpfOptions(seed=s, it_max=it_max)
                        counts = variable_counts(case)
                        runner = run_aqpf
                    elif solver == "aqopf":
                        opts = AqopfOptions(seed=s) if it_max is None else AqopfOptions(seed=s, it_max=it_max)
                        counts = opf_variable_counts(case, opts)
                        runner = run_aqopf
                    else:
                        raise ValueError(f"unknown solver {solver!r}")
                    try:
                        trace = runner(case, opts)
                    except StallError as exc:
                        trace = exc.trace
                    sm = trace.summary
                    row.update(counts)
                    row.update(compile_time=sm.get("compile_time"), time_per_iteration=sm.get("time_per_iteration"),
                               total_time=sm.get("total_time"), iterations=trace.iterations,
                               residual=trace.residual, converged=trace.converged)
                    traces += [(case.name, r.it, r.residual, solver, rep) for r in trace.records]
                rows.append(row)
                log.info("bench %s/%s/%d residual=%.3e", case.name, solver, rep, row["residual"])
    return rows, traces


def cmd_bench(args) -> int:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    rows, traces = bench_rows(args.cases, solvers, args.repeats, args.seed, args.max_iter)
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(os.path.join(args.out_dir, "summary.csv"), BENCH_COLUMNS,
              [[r.get(c) if r.get(c) is not None else "" for c in BENCH_COLUMNS] for r in rows])
    with open(os.path.join(args.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(_finite({"schema": "aqflow-bench-v1", "rows": rows}), fh, indent=2)
    write_csv(os.path.join(args.out_dir, "traces.csv"), ["case", "iter", "residual", "solver", "repeat"], traces)
    if not args.no_plots:
        from . import plotting

        series: dict[str, list[float]] = {}
        for name, _, r, solver, rep in traces:
            if solver != "nr":
                series.setdefault(f"{name} {solver} #{rep}", []).append(r)
        plotting.residual_plot(series, os.path.join(args.out_dir, "residuals.png"))
        plotting.variable_count_plot(rows, os.path.join(args.out_dir, "variables.png"))
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aqflow", description="Power flow and OPF via iterated binary optimization.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--seed", type=int, default=DEFAULT_SEED, help="base random seed (default 0)")
    ap.add_argument("--threads", type=int, default=None, help="annealer worker threads")
    ap.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    def solver_flags(p):
        p.add_argument("case", help="MATPOWER .m or gridcase-v1 .json file")
        p.add_argument("--partition-fraction", type=float, default=0.0)
        p.add_argument("--epsilon", type=float, default=1e-2, help="residual threshold, (MW^2+MVAR^2)/2")
        p.add_argument("--max-iter", type=int, default=None)
        p.add_argument("--reads", type=int, default=None, help="annealer reads per iteration")
        p.add_argument("--sweeps", type=int, default=None, help="annealer sweeps per read")
        p.add_argument("--reference", default=None,
                       help="RunReport JSON to compare against, or 'nr' to solve one on the fly")
        p.add_argument("--out", default=None, help="report path (JSON); trace CSV and figures go alongside")
        p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")

    p = sub.add_parser("pf", help="solve the power flow")
    solver_flags(p)
    p.add_argument("--solver", choices=["nr", "aqpf"], default="aqpf")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("opf", help="solve the optimal power flow")
    solver_flags(p)
    p.add_argument("--solver", choices=["aqopf"], default="aqopf")
    p.add_argument("--cost-form", choices=["squared", "linear"], default="squared")
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("perturb", help="write a stressed copy of a case")
    p.add_argument("case")
    p.add_argument("--mode", choices=["load", "rx"], required=True)
    p.add_argument("--factor", type=float, required=True)
    p.add_argument("--buses", default=None, help="internal bus ids (load mode), comma separated")
    p.add_argument("--branches", default=None, help="branch positions (rx mode), comma separated")
    p.add_argument("--r-floor", type=float, default=0.0, help="resistance floor before scaling (rx mode)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("bench", help="variable counts, timings and residual traces for several cases")
    p.add_argument("cases", nargs="+")
    p.add_argument("--solvers", default="aqpf")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--out-dir", default="bench")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    log.info("seed=%d", args.seed)
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args)
    except (CaseError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
