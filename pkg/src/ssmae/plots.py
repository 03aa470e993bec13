"""Matplotlib renderings written next to the delimited artifacts."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# fixed metadata keeps PNG bytes reproducible across identical runs
_SAVE_KW = {"dpi": 120, "metadata": {"Software": "ssmae"}}


def save_loss_curves(rows: list[dict], path, columns: tuple[str, ...]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [row["step"] for row in rows]
    for column in columns:
        ax.plot(steps, [row[column] for row in rows], label=column)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_label_map(labels: np.ndarray, num_classes: int, path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    shown = ax.imshow(labels, cmap="tab20", vmin=0, vmax=max(num_classes, 1), interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(shown, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_confusion_heatmap(counts: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    shown = ax.imshow(counts, cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_xticks(range(counts.shape[0]), [str(c + 1) for c in range(counts.shape[0])])
    ax.set_yticks(range(counts.shape[0]), [str(c + 1) for c in range(counts.shape[0])])
    fig.colorbar(shown, ax=ax)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_mask_planes(
    original: np.ndarray,
    spatial_masked: np.ndarray,
    spectral_masked: np.ndarray,
    path,
    bands: tuple[int, ...] = (0, 1, 2),
) -> None:
    """One row per image (original, spatial, spectral), one column per band."""
    bands = tuple(b for b in bands if b < original.shape[0])
    images = [("input", original), ("spatial mask", spatial_masked), ("spectral mask", spectral_masked)]
    fig, axes = plt.subplots(len(images), len(bands), figsize=(2.2 * len(bands), 6.2), squeeze=False)
    low, high = original.min(), original.max()
    for r, (label, cube) in enumerate(images):
        for c, band in enumerate(bands):
            ax = axes[r][c]
            ax.imshow(cube[band], cmap="magma", vmin=low, vmax=high, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"band {band}")
            if c == 0:
                ax.set_ylabel(label)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
