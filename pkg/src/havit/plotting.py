"""Figures written next to the CSV outputs."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def figsize(width: float = 6.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width, width * ratio


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curves(metrics, path) -> None:
    """Loss and accuracy per epoch, one panel each."""
    epochs = [m.epoch for m in metrics]
    with plt.rc_context(RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=figsize(8.0, 0.35))
        ax_loss.plot(epochs, [m.train_loss for m in metrics], marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_acc.plot(epochs, [100 * m.train_acc for m in metrics], marker="o", ms=3, label="train")
        ax_acc.plot(epochs, [100 * m.eval_acc for m in metrics], marker="s", ms=3, label="eval")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy (%)")
        ax_acc.legend(frameon=False)
        _save(fig, path)


def plot_alpha_sweep(rows, path) -> None:
    """Accuracy against alpha per init strategy, with the baseline as a line."""
    base = next(r for r in rows if r.alpha is None)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(5.0))
        for init, marker in (("random", "o"), ("zero", "s")):
            cells = sorted((r.alpha, r.final_acc) for r in rows if r.init == init)
            if cells:
                a, acc = zip(*cells)
                ax.plot(a, [100 * x for x in acc], marker=marker, ms=4, label=init.capitalize())
        ax.axhline(100 * base.final_acc, color="0.4", ls="--", lw=1, label="Baseline")
        ax.set_xlabel(r"$\alpha$")
        ax.set_ylabel("accuracy (%)")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_attention_maps(maps: Mapping[tuple[int, int], np.ndarray], path,
                        images: Sequence[np.ndarray] | None = None) -> None:
    """Grid of CLS attention maps: rows are images, columns are layers."""
    img_ids = sorted({i for i, _ in maps})
    layers = sorted({l for _, l in maps})
    extra = 1 if images is not None else 0
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(img_ids), len(layers) + extra, squeeze=False,
                                 figsize=(1.6 * (len(layers) + extra), 1.6 * len(img_ids)))
        for r, i in enumerate(img_ids):
            if images is not None:
                img = np.transpose(images[r], (1, 2, 0))
                axes[r, 0].imshow(img.squeeze() if img.shape[-1] == 1 else img)
                axes[r, 0].set_title("input" if r == 0 else "")
            for c, l in enumerate(layers):
                ax = axes[r, c + extra]
                ax.imshow(maps[(i, l)], cmap="inferno", interpolation="nearest")
                if r == 0:
                    ax.set_title(f"layer {l}")
        for ax in axes.flat:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)
