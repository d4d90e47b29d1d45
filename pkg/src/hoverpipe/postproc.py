"""Prediction bundle to instances, nuclear classes and cleaned layer maps."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage as ndi

from . import raster
from .errors import MarkerOutsideForeground, ShapeMismatch
from .hover import LAYER_CLASSES, TargetBundle

FINAL_CLASSES = ("other", "basal", "epithelium", "keratin")
CLASS_CODE = {"other": 1, "basal": 2, "epithelium": 3, "keratin": 4}
EPITHELIAL_LAYERS = (2, 3, 4)

SOFTMAX_TOL = 1e-5


@dataclass
class PredictionBundle:
    """Branch outputs for one tile, each ``(C, H, W)``.

    ``np``, ``nc`` and ``ls`` are per-pixel softmax probabilities; ``hover``
    holds the regressed horizontal/vertical maps.
    """

    np: np.ndarray
    hover: np.ndarray
    nc: np.ndarray
    ls: np.ndarray

    def __post_init__(self):
        for f, channels in (("np", 2), ("hover", 2), ("nc", 3), ("ls", 5)):
            arr = np.asarray(getattr(self, f), dtype=np.float64)
            if arr.ndim != 3 or arr.shape[0] != channels:
                raise ShapeMismatch(f"{f} must be ({channels}, H, W), got {arr.shape}")
            setattr(self, f, arr)
        shapes = {getattr(self, f).shape[1:] for f in ("np", "hover", "nc", "ls")}
        if len(shapes) != 1:
            raise ShapeMismatch(f"branch rasters disagree on extent: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.np.shape[1:]

    def check_softmax(self, tol: float = SOFTMAX_TOL) -> None:
        for f in ("np", "nc", "ls"):
            s = getattr(self, f).sum(axis=0)
            if s.size and np.max(np.abs(s - 1.0)) > tol:
                raise ValueError(f"{f} channels do not sum to 1 within {tol}")

    @classmethod
    def from_targets(cls, target: TargetBundle) -> "PredictionBundle":
        return cls(np=target.np.copy(), hover=target.hover.copy(),
                   nc=target.nc.copy(), ls=target.ls.copy())


@dataclass
class PostprocParams:
    np_threshold: float = 0.5
    marker_gradient_threshold: float = 0.75
    min_marker_area: int = 10
    min_nucleus_area: int = 10
    layer_morph_radius: int = 5
    # None -> 64 px per 256x256 tile, scaled with tile area
    layer_min_object: Optional[int] = None
    layer_min_hole: Optional[int] = None

    def __post_init__(self):
        for name in ("np_threshold", "marker_gradient_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("min_marker_area", "min_nucleus_area", "layer_morph_radius"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("layer_min_object", "layer_min_hole"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    def layer_areas(self, shape) -> tuple[int, int]:
        scaled = max(1, int(round(64 * shape[0] * shape[1] / 65536)))
        obj = self.layer_min_object if self.layer_min_object is not None else scaled
        hole = self.layer_min_hole if self.layer_min_hole is not None else scaled
        return obj, hole

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class NucleusRecord:
    label: int
    area: int
    centroid: tuple[float, float]
    final_class: str
    bbox: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))  # r0, c0, r1, c1 (exclusive)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "area": self.area,
            "centroid": [self.centroid[0], self.centroid[1]],
            "bbox": list(self.bbox),
            "final_class": self.final_class,
        }


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def boundary_strength(hover: np.ndarray) -> np.ndarray:
    """Per-pixel boundary evidence in [0, 1] from the HoVer gradients."""
    gh = _minmax(np.abs(raster.sobel(hover[0], "horizontal")))
    gv = _minmax(np.abs(raster.sobel(hover[1], "vertical")))
    return np.maximum(gh, gv)


def energy_and_markers(bundle: PredictionBundle, params: PostprocParams = PostprocParams()):
    """Foreground mask, flooding energy and watershed markers.

    The energy is the boundary strength inside the foreground (low in nucleus
    interiors, high on shared boundaries) and ``+inf`` elsewhere.
    """
    foreground = bundle.np[1] > params.np_threshold
    strength = boundary_strength(bundle.hover)
    energy = np.where(foreground, strength, np.inf)
    seeds = foreground & (strength < params.marker_gradient_threshold)
    seeds = raster.remove_small(seeds, "objects", params.min_marker_area)
    markers = raster.connected_components(seeds)
    return foreground, energy, markers


def watershed_segment(
    foreground: np.ndarray,
    energy: np.ndarray,
    markers: np.ndarray,
    params: PostprocParams = PostprocParams(),
) -> np.ndarray:
    """Priority-flood watershed restricted to the foreground.

    Pixels leave the queue in ``(energy, row, col)`` order, which is total,
    so the result does not depend on anything but the inputs.
    """
    foreground = np.asarray(foreground, dtype=bool)
    markers = np.asarray(markers)
    if not (foreground.shape == energy.shape == markers.shape):
        raise ShapeMismatch("foreground, energy and markers must share extent")
    if np.any((markers > 0) & ~foreground):
        raise MarkerOutsideForeground("marker pixels must lie inside the foreground")

    h, w = foreground.shape
    out = markers.astype(np.int64).ravel().copy()
    fg = foreground.ravel()
    en = np.asarray(energy, dtype=np.float64).ravel()
    seeds = np.flatnonzero(out)
    heap = [(en[p], p) for p in seeds.tolist()]  # flat index orders by (row, col)
    heapq.heapify(heap)
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        _, p = pop(heap)
        lab = out[p]
        r, c = divmod(p, w)
        for q, ok in ((p - w, r > 0), (p + w, r < h - 1), (p - 1, c > 0), (p + 1, c < w - 1)):
            if ok and fg[q] and out[q] == 0:
                out[q] = lab
                push(heap, (en[q], q))
    out = out.reshape(h, w)
    # touching instances share one foreground component, so filter per label
    areas = np.bincount(out.ravel())
    small = areas < params.min_nucleus_area
    small[0] = False
    out[small[out]] = 0
    return raster.relabel_dense(out)


def classify_nuclei_majority(instances: np.ndarray, nc_prob: np.ndarray) -> dict[int, str]:
    """Majority vote of per-pixel NC argmax; background votes are ignored, ties go to other."""
    instances = np.asarray(instances)
    if nc_prob.shape[1:] != instances.shape:
        raise ShapeMismatch("nc_prob and instances disagree on extent")
    votes = np.argmax(nc_prob, axis=0)
    n = int(instances.max(initial=0))
    fg = instances > 0
    other = np.bincount(instances[fg & (votes == 1)], minlength=n + 1)
    epi = np.bincount(instances[fg & (votes == 2)], minlength=n + 1)
    return {
        label: ("epithelial" if epi[label] > other[label] else "other")
        for label in raster.label_ids(instances)
    }


def clean_layer_map(ls_prob: np.ndarray, params: PostprocParams = PostprocParams()) -> np.ndarray:
    """Argmax layer map with per-class opening/closing and small-region cleanup."""
    ls_prob = np.asarray(ls_prob, dtype=np.float64)
    shape = ls_prob.shape[1:]
    raw = np.argmax(ls_prob, axis=0)
    min_obj, min_hole = params.layer_areas(shape)
    radius = params.layer_morph_radius
    claims = np.zeros((len(LAYER_CLASSES),) + shape, dtype=bool)
    for cls in range(1, len(LAYER_CLASSES)):
        m = raw == cls
        if not m.any():
            continue
        m = raster.morphology(m, "open", radius)
        m = raster.morphology(m, "close", radius)
        m = raster.remove_small(m, "objects", min_obj)
        m = raster.remove_small(m, "holes", min_hole)
        claims[cls] = m
    # contested pixels go to the claiming class with the highest probability
    scores = np.where(claims, ls_prob, -np.inf)
    best = np.argmax(scores, axis=0)
    out = np.where(claims.any(axis=0), best, 0)
    return out.astype(np.uint8)


def fuse_nuclei_layers(
    instances: np.ndarray,
    nucleus_classes: Mapping[int, str],
    layer_map: np.ndarray,
):
    """Assign epithelial nuclei the layer at their centroid.

    Nuclei voted ``other`` keep that class wherever they sit. For epithelial
    nuclei whose rounded centroid is not in an epithelial layer we fall back
    to the majority epithelial layer under the mask, then to the nearest
    epithelial-layer pixel, then to ``epithelium``.
    """
    instances = np.asarray(instances)
    layer_map = np.asarray(layer_map)
    if instances.shape != layer_map.shape:
        raise ShapeMismatch(f"instances {instances.shape} vs layers {layer_map.shape}")
    h, w = instances.shape
    records = []
    class_map = np.zeros(instances.shape, dtype=np.uint8)
    epi_pixels = None
    for label, sl in enumerate(ndi.find_objects(instances), start=1):
        if sl is None:
            continue
        local = instances[sl] == label
        rows, cols = np.nonzero(local)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        cr, cc = float(rows.mean()), float(cols.mean())
        cls = nucleus_classes.get(label, "other")
        if cls == "epithelial":
            ri = min(max(int(np.floor(cr + 0.5)), 0), h - 1)
            ci = min(max(int(np.floor(cc + 0.5)), 0), w - 1)
            layer = int(layer_map[ri, ci])
            if layer not in EPITHELIAL_LAYERS:
                under = np.bincount(layer_map[rows, cols], minlength=5)[2:5]
                if under.any():
                    layer = 2 + int(np.argmax(under))
                else:
                    if epi_pixels is None:
                        epi_pixels = np.argwhere(np.isin(layer_map, EPITHELIAL_LAYERS))
                    if len(epi_pixels):
                        d2 = (epi_pixels[:, 0] - cr) ** 2 + (epi_pixels[:, 1] - cc) ** 2
                        pr, pc = epi_pixels[int(np.argmin(d2))]
                        layer = int(layer_map[pr, pc])
                    else:
                        layer = 3
            final = LAYER_CLASSES[layer]
        else:
            final = "other"
        class_map[rows, cols] = CLASS_CODE[final]
        records.append(NucleusRecord(
            label=label, area=int(rows.size), centroid=(cr, cc), final_class=final,
            bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
    return records, class_map


def paint_records(instances: np.ndarray, records) -> np.ndarray:
    """Rebuild a nuclear class map from records."""
    lut = np.zeros(int(np.asarray(instances).max(initial=0)) + 1, dtype=np.uint8)
    for rec in records:
        lut[rec.label] = CLASS_CODE[rec.final_class]
    return lut[instances]


@dataclass
class PostprocResult:
    instances: np.ndarray
    records: list
    nuclear_class_map: np.ndarray
    layer_map: np.ndarray
    nucleus_classes: dict = field(default_factory=dict)


def run_full_postprocess(bundle: PredictionBundle, params: PostprocParams = PostprocParams()) -> PostprocResult:
    fg, energy, markers = energy_and_markers(bundle, params)
    instances = watershed_segment(fg, energy, markers, params)
    votes = classify_nuclei_majority(instances, bundle.nc)
    layer_map = clean_layer_map(bundle.ls, params)
    records, class_map = fuse_nuclei_layers(instances, votes, layer_map)
    return PostprocResult(instances, records, class_map, layer_map, votes)
