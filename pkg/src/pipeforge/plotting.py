"""Matplotlib figures for evaluation reports and training curves (files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_COLORS = {"auto_transrl": "tab:blue", "template": "tab:orange", "vanilla": "tab:gray"}


def accuracy_figures(rows, stem: str) -> list[str]:
    """One grouped bar chart per bed: accuracy per distortion spec and method."""
    paths = []
    beds = list(dict.fromkeys(r[1] for r in rows))
    for bed in beds:
        sub = [r for r in rows if r[1] == bed]
        specs = sorted({r[2] for r in sub})
        methods = list(dict.fromkeys(r[0] for r in sub))
        cell = {(r[0], r[2]): (r[3], r[4]) for r in sub}
        x = np.arange(len(specs))
        width = 0.8 / max(1, len(methods))
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(specs) + 2), 4.5))
        for k, m in enumerate(methods):
            acc = [cell.get((m, s), (np.nan, 0))[0] for s in specs]
            err = [cell.get((m, s), (np.nan, 0))[1] for s in specs]
            ax.bar(x + (k - (len(methods) - 1) / 2) * width, acc, width, yerr=err,
                   label=m, color=METHOD_COLORS.get(m), capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(specs, rotation=70, ha="right", fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("classification accuracy")
        ax.set_title(f"{bed} bed")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = f"{stem}_{bed}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def learning_curve(metrics, path: str) -> str:
    u = [m["update"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(u, [m["mean_reward"] for m in metrics], label="mean reward")
    ax.plot(u, [m["baseline"] for m in metrics], label="baseline", linestyle="--")
    ax.set_xlabel("update")
    ax.set_ylabel("reward")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
