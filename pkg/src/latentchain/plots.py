"""Figure rendering for report commands.

Every report CSV gets a companion PNG. Matplotlib is imported lazily with
the Agg backend so headless runs and tests never touch a display.
"""

from __future__ import annotations

from pathlib import Path


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def robustness_figure(path, reports):
    """Relative accuracy per generation step, one line per model/noise level."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    models = sorted({r.model_tag for r in reports})
    cmap = plt.get_cmap("viridis")
    mags = sorted({r.magnitude for r in reports})
    for r in reports:
        steps = range(1, len(r.relative) + 1)
        color = cmap(mags.index(r.magnitude) / max(len(mags) - 1, 1))
        style = ["-", "--", ":", "-."][models.index(r.model_tag) % 4]
        ax.plot(steps, r.relative, style, color=color, marker="o", markersize=3,
                label=f"{r.model_tag} noise={r.magnitude:g}")
    ax.set_xlabel("generation step")
    ax.set_ylabel("accuracy relative to zero noise")
    ax.set_xticks(range(1, 1 + max(len(r.relative) for r in reports)))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def sweep_figure(path, curves):
    """Major-contributor rate vs training step for each loss scale."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for k in sorted(curves):
        steps = [s for s, _ in curves[k]]
        rates = [r for _, r in curves[k]]
        ax.plot(steps, rates, marker="o", markersize=3, label=f"k={k:g}")
    ax.set_xlabel("training step")
    ax.set_ylabel("correct major contributor rate")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plane_figure(path, records):
    """Percentile histogram plus the alpha/beta scatter."""
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    pcts = [r.percentile for r in records]
    ax1.hist(pcts, bins=50, color="tab:blue", alpha=0.8)
    ax1.set_xlabel("sibling-plane rank percentile")
    ax1.set_ylabel("steps")
    alphas = [r.alpha for r in records]
    betas = [r.beta for r in records]
    colors = ["tab:green" if r.correct_major else "tab:red" for r in records]
    ax2.scatter(alphas, betas, c=colors, s=6, alpha=0.5)
    ax2.set_xlabel("alpha (correct sibling)")
    ax2.set_ylabel("beta (other sibling)")
    ax2.axline((0, 0), slope=1, color="gray", linewidth=0.8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def pca_figure(path, origins, coords):
    """Embeddings as diamonds, predictions as dots, first two components."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 6))
    import numpy as np
    origins = np.asarray(origins)
    emb = origins == "embedding"
    ax.scatter(coords[~emb, 0], coords[~emb, 1], s=8, alpha=0.5,
               color="tab:blue", label="prediction")
    ax.scatter(coords[emb, 0], coords[emb, 1], marker="D", s=40,
               color="tab:red", label="embedding")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curve_figure(path, rows):
    """Loss curve from a training log (step, phase, loss, lr, seed rows)."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [int(r[0]) for r in rows]
    losses = [float(r[2]) for r in rows]
    ax.plot(steps, losses, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
