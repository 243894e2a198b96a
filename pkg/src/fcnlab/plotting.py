"""Matplotlib figures written next to CSV reports (Agg backend, files only)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path, title=None):
    """Training loss per iteration with per-epoch validation mean IU on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    it = [r["iteration"] for r in history]
    ax.plot(it, [r["loss"] for r in history], lw=1, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss", color="tab:blue")
    val = [(r["iteration"], r["mean_iu"]) for r in history if r.get("mean_iu") is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:orange")
        ax2.set_ylabel("val mean IU", color="tab:orange")
        ax2.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_iu_bound(factors, values, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(factors, values, "o-")
    ax.set_xscale("log", base=2)
    ax.set_xticks(factors, [str(f) for f in factors])
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("downsampling factor")
    ax.set_ylabel("mean IU upper bound")
    return _save(fig, path)


def plot_confusion(counts, path, names=None):
    """Row-normalized confusion matrix (rows: truth, columns: prediction)."""
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    n = len(counts)
    fig, ax = plt.subplots(figsize=(1 + 0.6 * n, 1 + 0.5 * n))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    names = names or [str(i) for i in range(n)]
    ax.set_xticks(range(n), names)
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_predictions(images, preds, truths, palette, path, limit=4):
    """Image / truth / prediction rows for the first few samples."""
    k = min(limit, len(images))
    fig, axes = plt.subplots(k, 3, figsize=(6, 2 * k), squeeze=False)
    for i in range(k):
        axes[i, 0].imshow(np.transpose(images[i], (1, 2, 0)))
        axes[i, 1].imshow(palette[np.clip(truths[i], 0, len(palette) - 1)] * (truths[i] != 255)[..., None])
        axes[i, 2].imshow(palette[preds[i]])
        for ax in axes[i]:
            ax.axis("off")
    for ax, t in zip(axes[0], ("image", "truth", "prediction")):
        ax.set_title(t)
    return _save(fig, path)
