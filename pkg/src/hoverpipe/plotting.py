"""Figures for post-processing outputs and evaluation reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .hover import LAYER_CLASSES  # noqa: E402

# background, other, basal, epithelium, keratin
CLASS_RGB = np.array([
    [255, 255, 255],
    [255, 140, 0],
    [220, 30, 30],
    [40, 170, 60],
    [60, 90, 220],
], dtype=np.uint8)
CLASS_CMAP = ListedColormap(CLASS_RGB / 255.0, name="hoverpipe_classes")

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def overlay_rgb(class_map: np.ndarray, layer_map: np.ndarray, alpha: float = 0.35) -> np.ndarray:
    """Layer colours washed out underneath solid nucleus colours, as uint8 RGB."""
    layers = CLASS_RGB[np.asarray(layer_map)].astype(np.float64)
    base = 255.0 * (1 - alpha) + layers * alpha
    nuclei = np.asarray(class_map) > 0
    base[nuclei] = CLASS_RGB[np.asarray(class_map)[nuclei]]
    return np.clip(np.floor(base + 0.5), 0, 255).astype(np.uint8)


def _legend(ax):
    handles = [plt.Rectangle((0, 0), 1, 1, color=CLASS_RGB[k] / 255.0, ec="k", lw=0.3)
               for k in range(len(LAYER_CLASSES))]
    ax.legend(handles, LAYER_CLASSES, loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False)


def plot_segmentation(class_map, layer_map, path, instances=None):
    """Side-by-side nuclear class map and layer map."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        axes[0].imshow(np.asarray(class_map), cmap=CLASS_CMAP, vmin=0, vmax=4, interpolation="nearest")
        title = "nuclear classes"
        if instances is not None:
            title += f" ({int(np.asarray(instances).max(initial=0))} nuclei)"
        axes[0].set_title(title)
        axes[1].imshow(np.asarray(layer_map), cmap=CLASS_CMAP, vmin=0, vmax=4, interpolation="nearest")
        axes[1].set_title("layers")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        _legend(axes[1])
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_report(report: dict, path):
    """Bar charts of the instance metrics and, when present, per-layer F1."""
    inst_keys = [k for k in ("dice", "aji", "dq", "sq", "pq", "f_d",
                             "f_c_other", "f_c_basal", "f_c_epithelium") if k in report]
    layer = report.get("layer")
    with plt.rc_context(STYLE):
        ncols = 2 if layer else 1
        fig, axes = plt.subplots(1, ncols, figsize=(4.5 * ncols, 3.2), squeeze=False)
        ax = axes[0, 0]
        ax.bar(range(len(inst_keys)), [report[k] for k in inst_keys], color="0.35")
        ax.set_xticks(range(len(inst_keys)))
        ax.set_xticklabels(inst_keys, rotation=45, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_title("nuclei")
        if layer:
            ax = axes[0, 1]
            f1 = [layer[name]["f1"] for name in LAYER_CLASSES]
            ax.bar(range(5), f1, color=CLASS_RGB / 255.0, edgecolor="k", linewidth=0.4)
            ax.axhline(layer["mean_f1"], color="k", ls="--", lw=0.8)
            ax.set_xticks(range(5))
            ax.set_xticklabels(LAYER_CLASSES, rotation=45, ha="right")
            ax.set_ylim(0, 1.05)
            ax.set_title(f"layer F1 (accuracy {layer['accuracy']:.3f})")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
