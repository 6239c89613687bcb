"""Plain Newton-Raphson power flow in rectangular coordinates.

Unknowns are ``(mu, omega)`` at every non-slack bus. PQ buses contribute a P
and a Q equation; PV buses a P equation and ``mu^2 + omega^2 = V_set^2``.
No damping or line search is applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .netmodel import (
    AdmittanceMatrix,
    BusKind,
    NetworkCase,
    VoltageState,
    build_admittance,
    compute_injections,
    compute_injections_pu,
    flat_start,
    specified_injections,
)


@dataclass(frozen=True)
class NrOptions:
    tol: float = 1e-8  # p.u. max-abs mismatch
    max_iter: int = 20
    flat_start: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class NrResult:
    converged: bool
    iterations: int
    v: VoltageState
    p: np.ndarray  # MW
    q: np.ndarray  # MVAR
    max_mismatch: float  # p.u.
    history: tuple[float, ...] = ()
    message: str = ""


class NotConverged(RuntimeError):
    """Newton-Raphson failed; ``result`` carries the last iterate."""

    def __init__(self, message: str, result: NrResult):
        super().__init__(message)
        self.result = result


def _jacobian(Y: AdmittanceMatrix, mu: np.ndarray, om: np.ndarray):
    G = Y.G.toarray()
    B = Y.B.toarray()
    a = G @ mu - B @ om
    b = G @ om + B @ mu
    dp_dmu = mu[:, None] * G + om[:, None] * B + np.diag(a)
    dp_dom = -mu[:, None] * B + om[:, None] * G + np.diag(b)
    dq_dmu = om[:, None] * G - mu[:, None] * B - np.diag(b)
    dq_dom = -om[:, None] * B - mu[:, None] * G + np.diag(a)
    return dp_dmu, dp_dom, dq_dmu, dq_dom


def _mismatch(case, Y, v, p_spec, q_spec, pv, pq, non_slack):
    p, q = compute_injections_pu(Y, v)
    vset = np.array([case.buses[i].v_set for i in pv])
    return np.concatenate([
        p[non_slack] - p_spec[non_slack],
        q[pq] - q_spec[pq],
        v.mu[pv] ** 2 + v.omega[pv] ** 2 - vset ** 2,
    ])


def solve_nr(case: NetworkCase, opts: NrOptions | None = None, *,
             start: VoltageState | None = None, strict: bool = True) -> NrResult:
    """Solve the power flow; raises :class:`NotConverged` on failure when ``strict``."""
    opts = opts or NrOptions()
    Y = build_admittance(case)
    base = case.mva_base
    p_spec, q_spec = (x / base for x in specified_injections(case))
    non_slack = np.array(case.non_slack, dtype=int)
    pv = np.array(case.indices(BusKind.PV), dtype=int)
    pq = np.array(case.indices(BusKind.PQ), dtype=int)

    v = start if start is not None and not opts.flat_start else flat_start(case)
    mu, om = v.mu.copy(), v.omega.copy()
    slack = case.slack
    mu[slack], om[slack] = case.buses[slack].v_set, 0.0

    history = []
    message = ""
    converged = False
    it = 0
    while True:
        state = VoltageState(mu, om)
        f = _mismatch(case, Y, state, p_spec, q_spec, pv, pq, non_slack)
        err = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(err)
        if not np.isfinite(err):
            message = f"mismatch diverged to {err} at iteration {it}"
            break
        if err <= opts.tol:
            converged = True
            break
        if it >= opts.max_iter:
            message = f"max_iter={opts.max_iter} reached, mismatch {err:.3e} p.u."
            break
        dp_dmu, dp_dom, dq_dmu, dq_dom = _jacobian(Y, mu, om)
        rows_p = np.hstack([dp_dmu[np.ix_(non_slack, non_slack)], dp_dom[np.ix_(non_slack, non_slack)]])
        rows_q = np.hstack([dq_dmu[np.ix_(pq, non_slack)], dq_dom[np.ix_(pq, non_slack)]])
        sel = np.searchsorted(non_slack, pv)
        rows_v = np.zeros((pv.size, 2 * non_slack.size))
        rows_v[np.arange(pv.size), sel] = 2 * mu[pv]
        rows_v[np.arange(pv.size), non_slack.size + sel] = 2 * om[pv]
        J = np.vstack([rows_p, rows_q, rows_v])
        try:
            lu = la.lu_factor(J, check_finite=True)
            if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * max(1.0, np.max(np.abs(J))):
                raise la.LinAlgError("singular")
            dx = la.lu_solve(lu, -f)
        except (la.LinAlgError, ValueError):
            message = f"singular Jacobian at iteration {it}"
            break
        if not np.all(np.isfinite(dx)) or np.max(np.abs(dx)) > 1e6:
            message = f"Newton step diverged at iteration {it}"
            break
        mu[non_slack] += dx[:non_slack.size]
        om[non_slack] += dx[non_slack.size:]
        it += 1

    state = VoltageState(mu, om)
    p, q = compute_injections(Y, state)
    result = NrResult(converged, it, state, p, q, history[-1], tuple(history), message)
    if strict and not converged:
        raise NotConverged(message, result)
    return result
