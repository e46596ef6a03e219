"""Matplotlib renderings written next to the delimited outputs.

Every report-producing command drops a PNG beside its CSV so results can be
eyeballed without extra tooling; pass --no-figures to skip.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_loss_curve(rows, out_path) -> Path:
    """Training curve: windowed mean outer loss per iteration."""
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        its = [r[0] for r in rows]
        losses = [r[1] for r in rows]
        ax.plot(its, losses, lw=1.0)
        if min(losses) > 0:
            ax.set_yscale("log")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("mean outer loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_eval_hist(mses, out_path, title="") -> Path:
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(np.asarray(mses), bins=40)
    ax.set_xlabel("per-task query MSE")
    ax.set_ylabel("tasks")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_cosine_decay(rows, out_path) -> Path:
    """Mean |cos| between rows vs column count, with the analytic reference."""
    out = Path(out_path)
    ns = [r[0] for r in rows]
    stats = [r[1] for r in rows]
    refs = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(ns, stats, "o-", label="measured")
    ax.plot(ns, refs, "--", label="sqrt(2/(pi n))")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("columns n")
    ax.set_ylabel("mean |cos| between rows")
    ax.legend(frameon=False)
    ax.grid(True, alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def render_table_chart(methods, shot_cols, cells, out_path) -> Path:
    """Grouped bars of mean MSE per method and shot count; cells may be None."""
    out = Path(out_path)
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    width = 0.8 / max(len(shot_cols), 1)
    xs = np.arange(len(methods))
    for si, shots in enumerate(shot_cols):
        means = []
        errs = []
        for mi, method in enumerate(methods):
            cell = cells.get((method, shots))
            means.append(cell[0] if cell else np.nan)
            errs.append(cell[1] if cell else 0.0)
        ax.bar(xs + si * width, means, width=width, yerr=errs, capsize=2,
               label=f"{shots}-shot")
    ax.set_xticks(xs + width * (len(shot_cols) - 1) / 2)
    ax.set_xticklabels(methods, rotation=15, fontsize=9)
    ax.set_ylabel("mean query MSE")
    ax.legend(frameon=False)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out
