"""Matplotlib figures written next to the CSV/JSON outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_trajectory(times: np.ndarray, mean: np.ndarray, std: np.ndarray, path: Path,
                    title: str = "") -> Path:
    """Mean state ± one standard deviation per component."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for j in range(mean.shape[1]):
        ax.plot(times, mean[:, j], label=f"E x{j + 1}")
        ax.fill_between(times, mean[:, j] - std[:, j], mean[:, j] + std[:, j], alpha=0.2)
    ax.set_xlabel("t")
    ax.set_title(title or "base trajectory")
    ax.legend()
    return _save(fig, path)


def plot_adjoints(times: np.ndarray, series: dict, path: Path, title: str = "") -> Path:
    """One panel per order; every flattened coefficient of p_k as a line."""
    orders = sorted(series)
    fig, axes = plt.subplots(len(orders), 1, figsize=(6, 2.2 * len(orders)), sharex=True,
                             squeeze=False)
    for ax, k in zip(axes[:, 0], orders):
        vals = series[k]
        for c in range(vals.shape[1]):
            ax.plot(times, vals[:, c], lw=1)
        ax.set_ylabel(f"p{k}")
    axes[-1, 0].set_xlabel("t")
    axes[0, 0].set_title(title or "adjoint processes (path mean)")
    return _save(fig, path)


def plot_condition(rows: Sequence[dict], path: Path, title: str = "") -> Path:
    """Test totals against t, one line per probe value, with error bars."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_v: dict = {}
    for r in rows:
        by_v.setdefault(r["v"], []).append(r)
    for v, rs in by_v.items():
        t = np.array([r["t"] for r in rs])
        y = np.array([r["total"] for r in rs], dtype=float)
        e = np.array([r["stderr"] for r in rs], dtype=float)
        ax.plot(t, y, label=f"v={v}")
        ax.fill_between(t, y - 3 * e, y + 3 * e, alpha=0.2)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("test value")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_loglog(eps: Sequence[float], curves: dict, path: Path, title: str = "",
                errors: Optional[dict] = None, ylabel: str = "") -> Path:
    """Log-log curves against ε; zero or negative values are skipped."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.asarray(eps, dtype=float)
    for name, vals in curves.items():
        y = np.asarray(vals, dtype=float)
        ok = y > 0
        if not ok.any():
            continue
        line, = ax.plot(x[ok], y[ok], "o-", label=name)
        if errors and name in errors:
            e = np.asarray(errors[name], dtype=float)[ok]
            ax.fill_between(x[ok], np.maximum(y[ok] - e, y[ok] * 1e-3), y[ok] + e,
                            color=line.get_color(), alpha=0.2)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("ε")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ratio_ladder(eps: Sequence[float], ratios: dict, bands: dict, path: Path,
                      title: str = "") -> Path:
    """Remainder ratios with their 3σ bands on a log ε axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.asarray(eps, dtype=float)
    for name in ratios:
        y = np.asarray(ratios[name], dtype=float)
        b = np.asarray(bands[name], dtype=float)
        line, = ax.plot(x, y, "o-", label=name)
        ax.plot(x, b, "--", color=line.get_color(), lw=0.8)
    ax.set_xscale("log")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("ε")
    ax.set_ylabel("|R(ε)| / ε²   (dashed: 3σ band)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ito(steps: Sequence[int], residuals: dict, path: Path, title: str = "") -> Path:
    """Mean absolute Itô residual against Δt for each random instance."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, vals in residuals.items():
        ax.plot(1.0 / np.asarray(steps, dtype=float), vals, "o-", label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("Δt")
    ax.set_ylabel("mean |LHS - RHS|")
    ax.set_title(title or "multilinear Itô residual")
    ax.legend(fontsize=7)
    return _save(fig, path)
