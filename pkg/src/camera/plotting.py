"""Matplotlib figures rendered next to the CSV artifacts (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_error_vs_cost(curves, path, title=None):
    """``curves`` maps a label to an Aggregate; plots median relative error with a 1-sd band of the mean."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, agg in curves.items():
        ok = agg.count > 0
        c = agg.cost_grid[ok]
        ax.plot(c, agg.median_error[ok], label=f"{label} (median)")
        lo = np.clip(agg.mean_error[ok] - agg.std_error[ok], 1e-6, None)
        ax.fill_between(c, lo, agg.mean_error[ok] + agg.std_error[ok], alpha=0.2)
    ax.set_yscale("log")
    ax.set_xlabel("cumulative cost")
    ax.set_ylabel("relative error in p_F")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_fidelity_histogram(records, path, title=None):
    """Pooled histogram of acquired fidelities over repetitions."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    h0 = records[0].histogram
    counts = np.sum([r.histogram["counts"] for r in records], axis=0)
    if "edges" in h0:
        edges = np.asarray(h0["edges"])
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="k")
    else:
        f = np.asarray(h0["fidelities"])
        ax.bar([str(v) for v in f], counts, edgecolor="k")
    ax.set_xlabel("fidelity s")
    ax.set_ylabel("acquisitions")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_contour(model, limit, path, n=200, title=None):
    """Posterior mean at s = 1 with the predicted level set and the design points."""
    from camera.report import contour_grid

    X, mu, _ = contour_grid(model, n)
    A = X[:, 0].reshape(n, n)
    B = X[:, 1].reshape(n, n)
    M = mu.reshape(n, n)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    cf = ax.contourf(A, B, M, levels=30, cmap="viridis")
    fig.colorbar(cf, ax=ax)
    ax.contour(A, B, limit.g(M), levels=[0.0], colors="r", linewidths=1.5)
    d = model.data
    sc = ax.scatter(d.X[:, 0], d.X[:, 1], c=d.s, cmap="coolwarm", vmin=0, vmax=1, edgecolors="k", s=18)
    fig.colorbar(sc, ax=ax, label="fidelity")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    if title:
        ax.set_title(title)
    return _save(fig, path)
