"""Figures for the Monte Carlo panels, drawn with the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "wald": dict(color="0.45", ls=":", marker="x"),
    "projection": dict(color="k", ls="--", marker="s"),
    "ac12": dict(color="tab:orange", ls="-.", marker="^"),
    "ics_normalized": dict(color="tab:blue", ls="-", marker="o"),
    "ics_unnormalized": dict(color="tab:green", ls="-", marker="d"),
}
LABELS = {
    "wald": "Wald",
    "projection": "Projection",
    "ac12": "AC12",
    "ics_normalized": "Normalized",
    "ics_unnormalized": "Unnormalized",
}


def _finish(fig, ax, path, legend=True):
    ax.grid(alpha=0.3, lw=0.5)
    if legend and ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_rejection(rows, path, alpha: float = 0.05, title: str = "Rejection rate under the null"):
    """Rejection rate against ``c`` per method, with a band of two MC standard errors."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for method in STYLE:
        sel = sorted((r for r in rows if r.method == method and r.a == 0.0), key=lambda r: r.c)
        if not sel:
            continue
        c = np.array([r.c for r in sel])
        p = np.array([r.reject_rate for r in sel])
        se = np.array([r.mc_se for r in sel])
        ax.plot(c, p, label=LABELS[method], **STYLE[method], ms=4, lw=1.2)
        ax.fill_between(c, p - 2 * se, p + 2 * se, color=STYLE[method]["color"], alpha=0.1, lw=0)
    ax.axhline(alpha, color="r", lw=0.8)
    ax.set_xlabel("c")
    ax.set_ylabel("rejection rate")
    ax.set_title(title, fontsize=10)
    _finish(fig, ax, path)


def plot_ics_below(rows, path, title: str = "Share with ICS at or below the cutoff"):
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for method in ("ac12", "ics_normalized", "ics_unnormalized"):
        sel = sorted((r for r in rows if r.method == method and r.a == 0.0 and r.ics_below_rate is not None), key=lambda r: r.c)
        if sel:
            ax.plot([r.c for r in sel], [r.ics_below_rate for r in sel], label=LABELS[method], **STYLE[method], ms=4, lw=1.2)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("c")
    ax.set_ylabel("frequency")
    ax.set_title(title, fontsize=10)
    _finish(fig, ax, path)


def plot_ics_distribution(quantile_rows, path, cutoff_log1p: float, title: str = "Distribution of log(1 + ICS)"):
    """Median with 5-95% and 25-75% bands from ``(c, method, q05, q25, q50, q75, q95)`` rows."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for method in ("ac12", "ics_normalized", "ics_unnormalized"):
        sel = sorted((r for r in quantile_rows if r[1] == method), key=lambda r: r[0])
        if not sel:
            continue
        arr = np.array([[r[0], *r[2:7]] for r in sel], dtype=float)
        col = STYLE[method]["color"]
        ax.plot(arr[:, 0], arr[:, 3], color=col, marker=STYLE[method]["marker"], ms=4, lw=1.2, label=LABELS[method])
        ax.fill_between(arr[:, 0], arr[:, 1], arr[:, 5], color=col, alpha=0.08, lw=0)
        ax.fill_between(arr[:, 0], arr[:, 2], arr[:, 4], color=col, alpha=0.18, lw=0)
    ax.axhline(cutoff_log1p, color="k", lw=1.0)
    ax.set_xlabel("c")
    ax.set_ylabel("log(1 + ICS)")
    ax.set_title(title, fontsize=10)
    _finish(fig, ax, path)


def plot_power(rows, path, c: float, alpha: float = 0.05):
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for method in STYLE:
        sel = sorted((r for r in rows if r.method == method and np.isclose(r.c, c)), key=lambda r: r.a)
        if sel:
            ax.plot([r.a for r in sel], [r.reject_rate for r in sel], label=LABELS[method], **STYLE[method], ms=4, lw=1.2)
    ax.axhline(alpha, color="r", lw=0.8)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("a")
    ax.set_ylabel("rejection rate")
    ax.set_title(f"Power against local alternatives, c = {c:g}", fontsize=10)
    _finish(fig, ax, path)


def plot_scaling(kappas, medians, slope, intercept, path, label: str = "median smallest singular value"):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.loglog(kappas, medians, "o", ms=4, label=label)
    k = np.asarray(kappas)
    ax.loglog(k, np.exp(intercept) * k**slope, "-", lw=1.0, label=f"fit, slope {slope:.3f}")
    ax.set_xlabel("bandwidth")
    ax.set_ylabel("singular value")
    _finish(fig, ax, path)
