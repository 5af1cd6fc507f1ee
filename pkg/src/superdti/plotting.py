"""PNG rendering of map slices, error maps and training curves.

Scalar maps are drawn in grayscale over a fixed window (``[0, 1]`` for
FA), colour maps as RGB clipped to ``[0, 1]``, and error maps as
``|estimate - reference|`` in grayscale over ``[0, ERROR_WINDOW]``.  A
slice array indexed ``[x, y]`` is shown with x to the right and y up.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ERROR_WINDOW = 0.2
_PNG_META = {"Software": None}


def _to_image(arr):
    a = np.asarray(arr, dtype=np.float64)
    return np.swapaxes(a, 0, 1)


def render_png(path, image, kind: str = "scalar", window=(0.0, 1.0), reference=None):
    """Write one 2-D slice as a PNG, one pixel per voxel.

    ``kind`` is ``"scalar"`` (grayscale over ``window``), ``"color"`` (RGB
    array of shape ``(X, Y, 3)``) or ``"error"`` (needs ``reference``;
    absolute difference over ``[0, ERROR_WINDOW]``).
    """
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if kind == "color":
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"colour slices must be (X, Y, 3), got {img.shape}")
        plt.imsave(path, np.clip(_to_image(img), 0, 1), origin="lower", metadata=_PNG_META)
        return path
    if img.ndim != 2:
        raise ValueError(f"scalar slices must be 2-D, got {img.shape}")
    if kind == "error":
        if reference is None:
            raise ValueError("error maps need a reference slice")
        img = np.abs(img - np.asarray(reference, dtype=np.float64))
        window = (0.0, ERROR_WINDOW)
    elif kind != "scalar":
        raise ValueError(f"unknown kind {kind!r}")
    plt.imsave(path, _to_image(img), cmap="gray", vmin=window[0], vmax=window[1],
               origin="lower", metadata=_PNG_META)
    return path


def plot_curves(path, curves: dict, title: str = ""):
    """Training/validation loss per epoch for each named run."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        c = np.asarray(curve, dtype=np.float64)
        if c.size == 0:
            continue
        ax.semilogy(c[:, 0], c[:, 1], label=f"{name} train")
        ax.semilogy(c[:, 0], c[:, 2], "--", label=f"{name} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def map_panel(path, maps: dict, reference=None, kind: str = "scalar", window=(0.0, 1.0)):
    """One row of slices per method; a second row of error maps when ``reference`` is given."""
    names = list(maps)
    rows = 2 if reference is not None else 1
    fig, axes = plt.subplots(rows, len(names), figsize=(2.4 * len(names), 2.4 * rows), squeeze=False)
    for j, name in enumerate(names):
        img = np.asarray(maps[name], dtype=np.float64)
        ax = axes[0, j]
        if kind == "color":
            ax.imshow(np.clip(_to_image(img), 0, 1), origin="lower")
        else:
            ax.imshow(_to_image(img), cmap="gray", vmin=window[0], vmax=window[1], origin="lower")
        ax.set_title(name, fontsize=8)
        if reference is not None:
            err = np.abs(img - np.asarray(reference, dtype=np.float64))
            if err.ndim == 3:
                err = err.mean(axis=-1)
            axes[1, j].imshow(_to_image(err), cmap="gray", vmin=0, vmax=ERROR_WINDOW, origin="lower")
    for ax in axes.ravel():
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
