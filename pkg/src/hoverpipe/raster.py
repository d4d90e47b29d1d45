"""Raster primitives shared by every stage of the pipeline.

Rasters are plain numpy arrays: ``(H, W)`` for single-channel maps and
``(C, H, W)`` for multi-channel stacks. Instance label maps are ``uint32``
with 0 as background; binary masks are ``bool``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage as ndi

from .errors import DegenerateHistogram, ImageTooSmall, UnknownLabel

SOBEL_H = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_V = SOBEL_H.T.copy()

_STRUCTURE = {
    4: ndi.generate_binary_structure(2, 1),
    8: ndi.generate_binary_structure(2, 2),
}


def _structure(connectivity: int) -> np.ndarray:
    try:
        return _STRUCTURE[connectivity]
    except KeyError:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}") from None


def connected_components(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label maximal connected foreground regions 1..K in raster-scan order.

    ``scipy.ndimage.label`` assigns labels in order of each region's first
    pixel in a row-major scan, which is the ordering we promise.
    """
    labels, _ = ndi.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    return labels.astype(np.uint32)


def relabel_dense(labels: np.ndarray) -> np.ndarray:
    """Map the positive labels present onto 1..K, preserving their order."""
    labels = np.asarray(labels)
    present = np.unique(labels)
    present = present[present > 0]
    lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=np.uint32)
    lut[present] = np.arange(1, present.size + 1, dtype=np.uint32)
    return lut[labels]


def label_ids(labels: np.ndarray) -> list[int]:
    ids = np.unique(labels)
    return [int(i) for i in ids if i > 0]


def centroid(labels: np.ndarray, label: int) -> tuple[float, float]:
    """Unweighted mean (row, col) of the pixels carrying ``label``."""
    rows, cols = np.nonzero(labels == label)
    if label <= 0 or rows.size == 0:
        raise UnknownLabel(label)
    return float(rows.mean()), float(cols.mean())


def centroids(labels: np.ndarray) -> dict[int, tuple[float, float]]:
    """Centroids of every instance at once."""
    ids = label_ids(labels)
    if not ids:
        return {}
    coms = ndi.center_of_mass(np.ones(labels.shape), labels, ids)
    return {i: (float(r), float(c)) for i, (r, c) in zip(ids, coms)}


def sobel(image: np.ndarray, axis: str) -> np.ndarray:
    """3x3 Sobel correlation with replicate padding.

    ``axis="horizontal"`` differentiates along columns (left to right),
    ``axis="vertical"`` along rows (top to bottom).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 3 or image.shape[1] < 3:
        raise ImageTooSmall(f"sobel needs a 2-D image of at least 3x3, got {image.shape}")
    kernel = _sobel_kernel(axis)
    return ndi.correlate(image, kernel, mode="nearest")


def sobel_adjoint(grad: np.ndarray, axis: str) -> np.ndarray:
    """Adjoint of :func:`sobel` as a linear map, i.e. ``J^T @ grad``.

    Convolution with the kernel on the zero-extended field gives the adjoint
    of the correlation on the padded domain; folding the one-pixel margin
    back onto the edge rows/columns is the adjoint of replicate padding.
    """
    grad = np.asarray(grad, dtype=np.float64)
    kernel = _sobel_kernel(axis)
    h, w = grad.shape
    padded = np.zeros((h + 2, w + 2))
    # correlation output (i, j) reads padded[i:i+3, j:j+3] weighted by kernel
    for di in range(3):
        for dj in range(3):
            k = kernel[di, dj]
            if k:
                padded[di:di + h, dj:dj + w] += k * grad
    out = padded[1:-1, 1:-1].copy()
    out[0, :] += padded[0, 1:-1]
    out[-1, :] += padded[-1, 1:-1]
    out[:, 0] += padded[1:-1, 0]
    out[:, -1] += padded[1:-1, -1]
    out[0, 0] += padded[0, 0]
    out[0, -1] += padded[0, -1]
    out[-1, 0] += padded[-1, 0]
    out[-1, -1] += padded[-1, -1]
    return out


def _sobel_kernel(axis: str) -> np.ndarray:
    if axis in ("horizontal", "h"):
        return SOBEL_H
    if axis in ("vertical", "v"):
        return SOBEL_V
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


@lru_cache(maxsize=32)
def disk(radius: int) -> np.ndarray:
    """Pixels within Euclidean distance ``radius`` of the centre."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def morphology(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    """Binary erode/dilate/open/close with a disk structuring element.

    Borders behave as replicate padding: erosion never eats pixels because
    of the raster edge and dilation never grows from outside it. This makes
    erosion and dilation an adjoint pair, so opening and closing are exactly
    idempotent.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    se = disk(radius)
    if op == "erode":
        return _erode(mask, se)
    if op == "dilate":
        return _dilate(mask, se)
    if op == "open":
        return _dilate(_erode(mask, se), se)
    if op == "close":
        return _erode(_dilate(mask, se), se)
    raise ValueError(f"unknown morphology op {op!r}")


def _erode(mask, se):
    return ndi.binary_erosion(mask, structure=se, border_value=1)


def _dilate(mask, se):
    return ndi.binary_dilation(mask, structure=se, border_value=0)


def remove_small(mask: np.ndarray, mode: str, min_area: int, connectivity: int = 4) -> np.ndarray:
    """Drop foreground objects (or fill interior holes) smaller than ``min_area``.

    Holes are background regions that do not touch the raster border.
    Regions with area exactly ``min_area`` survive.
    """
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if mode == "objects":
        target = mask
    elif mode == "holes":
        target = ~mask
    else:
        raise ValueError(f"mode must be 'objects' or 'holes', got {mode!r}")

    labels = connected_components(target, connectivity)
    areas = np.bincount(labels.ravel())
    small = areas < min_area
    small[0] = False
    if mode == "holes":
        border = np.unique(np.concatenate(
            [labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]]))
        small[border] = False
    flip = small[labels]
    out = mask.copy()
    out[flip] = not (mode == "objects")
    return out


def otsu_threshold(gray: np.ndarray) -> int:
    """Otsu threshold over the 256-bin histogram of a uint8 image.

    Pixels ``<= t`` form the lower class. The between-class variance is
    compared in exact integer arithmetic, so ties resolve to the smallest t.
    """
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ValueError("empty image")
    hist = np.bincount(gray.ravel().astype(np.int64), minlength=256)[:256]
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("all pixels share one intensity")
    n = int(hist.sum())
    total = int(np.dot(hist, np.arange(256)))
    best_t, best_num, best_den = 0, -1, 1
    w0 = s0 = 0
    for t in range(255):
        w0 += int(hist[t])
        s0 += t * int(hist[t])
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        # variance * n^2 = (s0*n - total*w0)^2 / (w0*w1)
        num = (s0 * n - total * w0) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t
