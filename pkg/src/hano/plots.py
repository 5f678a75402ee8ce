"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)


def plot_history(history, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ep = history.column("epoch")
        for key, style in (("train_l2", "-"), ("test_l2", "--"), ("train_h1", "-"), ("test_h1", "--")):
            ax.semilogy(ep, history.column(key), style, label=key.replace("_", " "))
        ax.set_xlabel("epoch")
        ax.set_ylabel("relative error")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_spectrum(report, path, split="test", reference=None):
    """Heat map of per-frequency error over epochs; columns sorted by |xi|.

    ``reference`` (mean |F(u)| per frequency) normalises each column.
    """
    epochs, err = report.table(split)
    if not epochs:
        raise ValueError(f"spectrum has no rows for split {split!r}")
    freqs = report.freqs
    order = np.argsort([np.hypot(*f) for f in freqs], kind="stable")
    vals = err[:, order]
    label = "mean |error|"
    if reference is not None:
        vals = vals / np.asarray(reference)[order]
        label = "normalised error"
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        im = ax.imshow(np.log10(vals.T + 1e-300), aspect="auto", origin="lower", cmap="viridis",
                       extent=(epochs[0] - 0.5, epochs[-1] + 0.5, -0.5, len(freqs) - 0.5))
        ax.set_yticks(range(len(freqs)))
        ax.set_yticklabels([f"({freqs[i][0]},{freqs[i][1]})" for i in order], fontsize=6)
        ax.set_xlabel("epoch")
        ax.set_ylabel("frequency (sorted by |xi|)")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label=f"log10 {label}")
        _save(fig, path)


def plot_complexity(rows, path):
    tokens = np.array([r["tokens"] for r in rows], dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.loglog(tokens, [r["hier_flops"] for r in rows], "o-", label="hierarchical")
        ax.loglog(tokens, [r["dense_flops"] for r in rows], "s-", label="dense")
        ax.set_xlabel("tokens N")
        ax.set_ylabel("flops")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_fields(a, u, pred, path):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 4, figsize=(12.0, 3.0))
        for ax, f, title in zip(axes, (a, u, pred, u - pred), ("a", "u", "prediction", "error")):
            im = ax.imshow(f, origin="lower", cmap="RdBu_r" if title == "error" else "viridis")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
            fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, path)
