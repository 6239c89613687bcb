"""Static figures written next to the CSV/JSON outputs (Agg backend, no display)."""
from __future__ import annotations

import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def residual_plot(traces: Mapping[str, Sequence[float]], path: str, epsilon: float | None = None) -> str:
    """Residual against iteration, one line per labelled trace, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, res in traces.items():
        if len(res):
            ax.semilogy(range(len(res)), res, label=label)
    if epsilon is not None:
        ax.axhline(epsilon, color="k", ls="--", lw=0.8, label="epsilon")
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual")
    ax.grid(True, which="both", alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    return _save(fig, path)


def bus_comparison_plot(report: dict, reference: dict, path: str) -> str:
    """Per-bus magnitude, angle, P and Q of a run against a reference run."""
    buses = report["buses"]
    ref = {b["id"]: b for b in reference["buses"]}
    ids = [b["id"] for b in buses]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, key, label in zip(axes.flat, ("v", "angle_deg", "p_mw", "q_mvar"),
                              ("|V| (p.u.)", "angle (deg)", "P (MW)", "Q (MVAR)")):
        ax.plot(ids, [ref[i][key] for i in ids], "o", mfc="none", label=reference.get("solver", "reference"))
        ax.plot(ids, [b[key] for b in buses], "x", label=report.get("solver", "run"))
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("bus")
    axes[0, 0].legend(fontsize=8)
    return _save(fig, path)


def variable_count_plot(rows: Sequence[dict], path: str) -> str:
    """Stacked base/slack/auxiliary variable counts per case."""
    rows = [r for r in rows if r.get("total")]
    labels = [f"{r['case']}\n{r['solver']}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    bottom = [0] * len(rows)
    for key in ("base", "slack", "auxiliary"):
        vals = [r.get(key) or 0 for r in rows]
        ax.bar(labels, vals, bottom=bottom, label=key)
        bottom = [a + b for a, b in zip(bottom, vals)]
    ax.set_ylabel("binary variables")
    ax.legend(fontsize=8)
    return _save(fig, path)
