"""Training targets for the four decoder branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage as ndi

from .errors import MissingClass, ShapeMismatch

NC_CLASSES = ("background", "other", "epithelial")
LAYER_CLASSES = ("background", "other", "basal", "epithelium", "keratin")
NUCLEUS_CLASSES = ("other", "epithelial")


def encode_hover(instances: np.ndarray) -> np.ndarray:
    """Per-instance normalised horizontal/vertical offsets from the centroid.

    Returns a ``(2, H, W)`` float64 stack: channel 0 holds the horizontal map,
    channel 1 the vertical. Within an instance each axis is divided by the
    largest absolute offset along it, so values lie in [-1, 1]; an axis one
    pixel wide encodes as 0. Background is 0.
    """
    instances = np.asarray(instances)
    out = np.zeros((2,) + instances.shape, dtype=np.float64)
    for idx, sl in enumerate(ndi.find_objects(instances), start=1):
        if sl is None:
            continue
        inst = instances[sl] == idx
        rows, cols = np.nonzero(inst)
        r_off = rows - rows.mean()
        c_off = cols - cols.mean()
        c_max = np.abs(c_off).max()
        r_max = np.abs(r_off).max()
        sub = out[(slice(None),) + sl]
        sub[0][rows, cols] = c_off / c_max if c_max > 0 else 0.0
        sub[1][rows, cols] = r_off / r_max if r_max > 0 else 0.0
    return out


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return (np.arange(n_classes)[:, None, None] == labels[None]).astype(np.float64)


@dataclass
class TargetBundle:
    """Ground-truth rasters, each ``(C, H, W)`` float64."""

    np: np.ndarray     # background, nucleus
    hover: np.ndarray  # horizontal, vertical
    nc: np.ndarray     # background, other, epithelial
    ls: np.ndarray     # background, other, basal, epithelium, keratin

    @property
    def shape(self) -> tuple[int, int]:
        return self.np.shape[1:]

    @property
    def nucleus_mask(self) -> np.ndarray:
        return self.np[1] > 0.5


def nc_label_map(instances: np.ndarray, nucleus_classes: Mapping[int, str]) -> np.ndarray:
    """Paint instances with NC indices (0 background, 1 other, 2 epithelial)."""
    instances = np.asarray(instances)
    n = int(instances.max(initial=0))
    lut = np.zeros(n + 1, dtype=np.uint8)
    for label in np.unique(instances):
        label = int(label)
        if label == 0:
            continue
        try:
            cls = nucleus_classes[label]
        except KeyError:
            raise MissingClass(label) from None
        if cls not in NUCLEUS_CLASSES:
            raise ValueError(f"nucleus class must be one of {NUCLEUS_CLASSES}, got {cls!r}")
        lut[label] = NC_CLASSES.index(cls)
    return lut[instances]


def make_target_bundle(
    instances: np.ndarray,
    nucleus_classes: Mapping[int, str],
    layers: np.ndarray,
) -> TargetBundle:
    instances = np.asarray(instances)
    layers = np.asarray(layers)
    if instances.shape != layers.shape:
        raise ShapeMismatch(f"instances {instances.shape} vs layers {layers.shape}")
    if layers.size and (layers.min() < 0 or layers.max() > 4):
        raise ValueError("layer labels must lie in 0..4")
    return TargetBundle(
        np=one_hot(instances > 0, 2),
        hover=encode_hover(instances),
        nc=one_hot(nc_label_map(instances, nucleus_classes), 3),
        ls=one_hot(layers, 5),
    )
