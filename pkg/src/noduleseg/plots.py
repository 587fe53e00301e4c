"""Report figures written next to the CSV/JSON outputs of a run."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# strip the Software/date metadata so reruns give identical PNG bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)


def stage_montage(stages, path, cols: int = 5) -> None:
    """Grid of the pipeline's stage images, titled in order."""
    stages = list(stages)
    rows = max(1, -(-len(stages) // cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.1 * rows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (title, img) in zip(axes.ravel(), stages):
            img = np.asarray(img)
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
            else:
                ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def loss_curve(losses, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        epochs = np.arange(1, len(losses) + 1)
        ax.plot(epochs, losses, marker="o", ms=2.5, lw=1.0, color="k")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean BCE")
        ax.set_yscale("log")
        _save(fig, path)


def energy_trace(rows, path) -> None:
    """Summed best window energy per generation, plus per-window relative gain."""
    by_gen: dict[int, float] = defaultdict(float)
    first: dict[int, float] = {}
    last: dict[int, float] = {}
    for window, gen, energy in rows:
        by_gen[gen] += energy
        first.setdefault(window, energy)
        last[window] = energy
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        gens = sorted(by_gen)
        ax0.plot(gens, [by_gen[g] for g in gens], color="k", lw=1.0)
        ax0.set_xlabel("generation")
        ax0.set_ylabel("sum of best window energies")
        windows = sorted(first)
        gain = [first[w] - last[w] for w in windows]
        ax1.bar(windows, gain, color="0.4", width=0.8)
        ax1.set_xlabel("window index")
        ax1.set_ylabel("energy decrease")
        fig.tight_layout()
        _save(fig, path)


def metrics_bars(report, path, before=None) -> None:
    names = ["accuracy", "sensitivity", "specificity", "dice", "jaccard"]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.6))
        if before is not None:
            ax.bar(x - 0.2, [getattr(before, n) for n in names], 0.4, color="0.7", label="initial")
            ax.bar(x + 0.2, [getattr(report, n) for n in names], 0.4, color="0.2", label="refined")
            ax.legend(frameon=False, loc="lower left")
        else:
            ax.bar(x, [getattr(report, n) for n in names], 0.6, color="0.2")
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylim(0, 1.05)
        _save(fig, path)
