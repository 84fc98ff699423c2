"""SVG figures for run and study artifacts."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    its = [r["iter"] for r in rows]
    losses = [r["loss"] for r in rows]
    ax.plot(its, losses, lw=1.0)
    if all(l > 0 for l in losses if np.isfinite(l)):
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("objective")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_convergence(rows, report, path):
    """One panel per reported quantity, dashed line at its ground truth."""
    if not report:
        return None
    n = len(report)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3 * nrows), squeeze=False)
    its = [r["iter"] for r in rows]
    for k, entry in enumerate(report):
        ax = axes[k // ncols][k % ncols]
        series = np.asarray([r[entry["column"]] for r in rows])
        if entry["transform"] == "exp":
            series = np.exp(series)
        ax.plot(its, series, lw=1.0)
        ax.axhline(entry["truth"], ls="--", color="k", lw=0.8)
        ax.set_title(entry["label"])
        ax.set_xlabel("iteration")
    for k in range(n, nrows * ncols):
        axes[k // ncols][k % ncols].axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_covariance(noise_measure, path):
    gamma = noise_measure.gamma_matrix().value
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(gamma, cmap="RdBu_r", vmin=-np.abs(gamma).max(), vmax=np.abs(gamma).max())
    fig.colorbar(im, ax=ax)
    ax.set_title("learned noise covariance")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_run_plots(result, out_dir):
    """Write the standard figures for a finished run; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if result.trace:
        written.append(plot_loss(result.trace, os.path.join(out_dir, "loss.svg")))
        drawable = [
            e for e in result.config.report
            if result.trace and e["column"] in result.trace[0]
        ]
        p = plot_convergence(result.trace, drawable, os.path.join(out_dir, "convergence.svg"))
        if p:
            written.append(p)
    written.append(plot_covariance(result.noise_measure, os.path.join(out_dir, "covariance.svg")))
    return written


def plot_study(rows, path):
    """Error against population size, one line per gradient mode."""
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        pts = sorted((r["N"], r["mean_rel_err"], r["std_rel_err"]) for r in rows if r["mode"] == mode)
        ns = [p[0] for p in pts]
        means = [p[1] for p in pts]
        stds = [p[2] for p in pts]
        ax.errorbar(ns, means, yerr=stds, marker="o", capsize=3, label=mode)
    if len({r["N"] for r in rows}) > 1:
        ns = sorted({r["N"] for r in rows})
        ref = [means[0] * np.sqrt(ns[0] / n) for n in ns]
        ax.plot(ns, ref, "k:", lw=0.8, label=r"$N^{-1/2}$")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("population size N")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
