"""Tissue masking and grid patch selection for whole-slide images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import raster
from .errors import DegenerateHistogram, PatchLargerThanImage, ShapeMismatch
from .postproc import EPITHELIAL_LAYERS

DEFAULT_MIN_OBJECT = 4096
DEFAULT_MIN_HOLE = 4096


@dataclass(frozen=True)
class TileSpec:
    origin: tuple[int, int]
    size: int
    tissue_fraction: float
    has_epithelium: bool

    def to_dict(self) -> dict:
        return {
            "origin": [self.origin[0], self.origin[1]],
            "size": self.size,
            "tissue_fraction": self.tissue_fraction,
            "has_epithelium": self.has_epithelium,
        }


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an ``(H, W, 3)`` uint8 image, rounded half up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def tissue_mask(rgb: np.ndarray, min_object: int = DEFAULT_MIN_OBJECT,
                min_hole: int = DEFAULT_MIN_HOLE) -> np.ndarray:
    """Tissue is the darker Otsu class of the luma, with small specks and holes removed.

    A single-intensity image has no tissue.
    """
    gray = luma(rgb)
    try:
        t = raster.otsu_threshold(gray)
    except DegenerateHistogram:
        return np.zeros(gray.shape, dtype=bool)
    mask = gray <= t
    mask = raster.remove_small(mask, "objects", min_object)
    return raster.remove_small(mask, "holes", min_hole)


def _cell(tissue, layers, r, c, patch, min_tissue, min_epithelium):
    t = tissue[r:r + patch, c:c + patch]
    lay = layers[r:r + patch, c:c + patch]
    frac = float(t.mean())
    epi = int(np.isin(lay, EPITHELIAL_LAYERS).sum()) >= min_epithelium
    return TileSpec((r, c), patch, frac, epi), (epi and frac >= min_tissue)


def select_patches(
    tissue: np.ndarray,
    layers: np.ndarray,
    patch: int = 256,
    min_tissue: float = 0.1,
    min_epithelium: int = 1,
    workers: int = 1,
) -> list[TileSpec]:
    """Non-overlapping grid cells that contain epithelium and enough tissue.

    Partial cells at the right/bottom border are discarded. Results are in
    (row, col) order whatever the worker count.
    """
    tissue = np.asarray(tissue, dtype=bool)
    layers = np.asarray(layers)
    if tissue.shape != layers.shape:
        raise ShapeMismatch(f"tissue {tissue.shape} vs layers {layers.shape}")
    if patch < 1:
        raise ValueError("patch must be >= 1")
    h, w = tissue.shape
    if patch > h or patch > w:
        raise PatchLargerThanImage(f"patch {patch} exceeds image {h}x{w}")

    def row(r):
        out = []
        for c in range(0, w - patch + 1, patch):
            spec, keep = _cell(tissue, layers, r, c, patch, min_tissue, min_epithelium)
            if keep:
                out.append(spec)
        return out

    rows = range(0, h - patch + 1, patch)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(row, rows))
    else:
        chunks = [row(r) for r in rows]
    return [spec for chunk in chunks for spec in chunk]
