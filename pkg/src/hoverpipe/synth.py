"""Deterministic synthetic scenes, ideal prediction bundles and corruptions.

Randomness comes from SplitMix64 used as a counter-based generator: the
i-th draw (i = 1, 2, ...) for seed ``s`` is ``mix(s + i * 0x9E3779B97F4A7C15)``
with the standard SplitMix64 finaliser (shifts 30/27/31, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB), all modulo 2**64. Integer
draws in ``[lo, hi]`` are ``lo + u % (hi - lo + 1)``; uniforms are
``(u >> 11) * 2**-53``; normals use Box-Muller on consecutive pairs.
Nucleus placement only uses integer draws, so scenes are reproducible
bit-for-bit on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from . import raster
from .errors import PlacementFailed
from .hover import LAYER_CLASSES, TargetBundle, make_target_bundle
from .postproc import CLASS_CODE, EPITHELIAL_LAYERS, PredictionBundle

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1
MAX_ATTEMPTS = 10_000

# top-to-bottom band order; fractions are still given in LAYER_CLASSES order
BAND_ORDER = (0, 4, 3, 2, 1)


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        z = (self.seed + self.counter * GAMMA) & MASK64
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.next_u64() % (hi - lo + 1)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.u64_array(n) >> np.uint64(11)
        return (u.astype(np.float64) * 2.0 ** -53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = (self.u64_array(2 * m) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = rad * np.cos(2.0 * math.pi * u2)
        z[1::2] = rad * np.sin(2.0 * math.pi * u2)
        return z[:n].reshape(shape)


@dataclass
class SceneParams:
    seed: int = 0
    extent: int = 256
    nucleus_count: int = 20
    radius_range: tuple[int, int] = (4, 8)
    min_gap: int = 2
    layer_band_fractions: tuple[float, ...] = (0.1, 0.3, 0.15, 0.3, 0.15)

    def __post_init__(self):
        fr = tuple(float(f) for f in self.layer_band_fractions)
        if len(fr) != 5 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("layer_band_fractions must be 5 non-negative values summing to 1")
        if self.min_gap < 0:
            raise ValueError("min_gap must be >= 0")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi or 2 * hi + 1 > self.extent:
            raise ValueError(f"radius_range {self.radius_range} does not fit extent {self.extent}")
        if self.nucleus_count < 0:
            raise ValueError("nucleus_count must be >= 0")


@dataclass
class CorruptionParams:
    gaussian_sigma: float = 0.0
    hover_noise_sigma: float = 0.0
    boundary_jitter: int = 0

    def __post_init__(self):
        if min(self.gaussian_sigma, self.hover_noise_sigma, self.boundary_jitter) < 0:
            raise ValueError("corruption parameters must be >= 0")

    @classmethod
    def uniform(cls, sigma: float) -> "CorruptionParams":
        return cls(gaussian_sigma=sigma, hover_noise_sigma=sigma)


@dataclass
class Scene:
    instances: np.ndarray
    nucleus_classes: dict[int, str]
    layer_map: np.ndarray
    params: SceneParams = field(default_factory=SceneParams)

    final_classes: dict[int, str] = field(init=False)

    def __post_init__(self):
        cents = raster.centroids(self.instances)
        self.final_classes = {}
        for label, cls in self.nucleus_classes.items():
            if cls == "epithelial":
                r, c = cents[label]
                self.final_classes[label] = LAYER_CLASSES[int(self.layer_map[math.floor(r + 0.5), math.floor(c + 0.5)])]
            else:
                self.final_classes[label] = "other"

    @property
    def nuclear_class_map(self) -> np.ndarray:
        lut = np.zeros(int(self.instances.max(initial=0)) + 1, dtype=np.uint8)
        for label, cls in self.final_classes.items():
            lut[label] = CLASS_CODE[cls]
        return lut[self.instances]


def band_map(extent: int, fractions) -> np.ndarray:
    layers = np.zeros((extent, extent), dtype=np.uint8)
    start = 0
    cum = 0.0
    for cls in BAND_ORDER:
        cum += fractions[cls]
        stop = extent if cls == BAND_ORDER[-1] else int(math.floor(cum * extent + 0.5))
        layers[start:stop, :] = cls
        start = stop
    return layers


def _ellipse(a: int, b: int) -> np.ndarray:
    """Axis-aligned ellipse with column semi-axis ``a`` and row semi-axis ``b``."""
    dr, dc = np.mgrid[-b:b + 1, -a:a + 1]
    return dr * dr * a * a + dc * dc * b * b <= a * a * b * b


def _gap_element(gap: int) -> np.ndarray:
    g = max(gap, 1)
    d = g - 1
    yy, xx = np.mgrid[-d:d + 1, -d:d + 1]
    return yy * yy + xx * xx < g * g


def generate_scene(params: SceneParams) -> Scene:
    """Place ``nucleus_count`` ellipses on horizontal layer bands.

    Pixel centres of distinct nuclei are at least ``max(min_gap, 1)`` apart.
    Nuclei whose centre sits in a basal/epithelium/keratin band are
    epithelial, the rest are other.
    """
    rng = SplitMix64(params.seed)
    n = params.extent
    layers = band_map(n, params.layer_band_fractions)
    instances = np.zeros((n, n), dtype=np.uint32)
    forbidden = np.zeros((n, n), dtype=bool)
    gap_se = _gap_element(params.min_gap)
    pad = gap_se.shape[0] // 2
    lo, hi = params.radius_range
    classes: dict[int, str] = {}
    attempts = 0
    label = 0
    while label < params.nucleus_count:
        if attempts >= MAX_ATTEMPTS:
            raise PlacementFailed(
                f"placed {label} of {params.nucleus_count} nuclei in {MAX_ATTEMPTS} attempts")
        attempts += 1
        a = rng.randint(lo, hi)
        b = rng.randint(lo, hi)
        cr = rng.randint(b, n - 1 - b)
        cc = rng.randint(a, n - 1 - a)
        shape = _ellipse(a, b)
        win = (slice(cr - b, cr + b + 1), slice(cc - a, cc + a + 1))
        if np.any(forbidden[win] & shape):
            continue
        label += 1
        instances[win][shape] = label
        classes[label] = "epithelial" if layers[cr, cc] in EPITHELIAL_LAYERS else "other"
        r0, r1 = max(cr - b - pad, 0), min(cr + b + pad + 1, n)
        c0, c1 = max(cc - a - pad, 0), min(cc + a + pad + 1, n)
        local = instances[r0:r1, c0:c1] == label
        forbidden[r0:r1, c0:c1] |= ndi.binary_dilation(local, structure=gap_se)
    return Scene(instances, classes, layers, params)


def target_bundle(scene: Scene) -> TargetBundle:
    return make_target_bundle(scene.instances, scene.nucleus_classes, scene.layer_map)


def perfect_bundle(scene: Scene) -> PredictionBundle:
    return PredictionBundle.from_targets(target_bundle(scene))


def corrupt(bundle: PredictionBundle, params: CorruptionParams, seed: int) -> PredictionBundle:
    """Seeded noise on every branch plus optional NP boundary jitter.

    Softmax branches get additive Gaussian noise, are clamped to >= 1e-7 and
    renormalised. All-zero parameters return an exact copy.
    """
    rng = SplitMix64(seed)
    out = PredictionBundle(np=bundle.np.copy(), hover=bundle.hover.copy(),
                           nc=bundle.nc.copy(), ls=bundle.ls.copy())
    j = int(params.boundary_jitter)
    if j > 0:
        fg = out.np[1] > 0.5
        band = raster.morphology(fg, "dilate", j) & ~raster.morphology(fg, "erode", j)
        coin = rng.uniform(fg.shape) < 0.5
        new_fg = np.where(band, coin, fg)
        changed = new_fg != fg
        out.np[1][changed] = new_fg[changed].astype(np.float64)
        out.np[0][changed] = 1.0 - out.np[1][changed]
    if params.gaussian_sigma > 0:
        for name in ("np", "nc", "ls"):
            arr = getattr(out, name)
            noisy = np.maximum(arr + params.gaussian_sigma * rng.normal(arr.shape), 1e-7)
            setattr(out, name, noisy / noisy.sum(axis=0, keepdims=True))
    if params.hover_noise_sigma > 0:
        out.hover = out.hover + params.hover_noise_sigma * rng.normal(out.hover.shape)
    return out
