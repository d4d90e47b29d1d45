"""Multi-task loss terms with analytic gradients.

Gradients are taken with respect to the branch outputs as they appear in a
:class:`~hoverpipe.postproc.PredictionBundle`: probabilities for NP/NC/LS
(after softmax) and raw values for the HoVer maps. A trainer that works on
logits chains the softmax Jacobian on top.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import raster
from .errors import ShapeMismatch
from .hover import TargetBundle
from .postproc import PredictionBundle

CE_CLAMP = 1e-7
DICE_EPS = 1e-3


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"prediction {np.shape(a)} vs target {np.shape(b)}")


def mse_hover(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over both HoVer channels and all pixels."""
    _same_shape(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def msge_gradient(pred: np.ndarray, target: np.ndarray, nucleus_mask: np.ndarray):
    """Squared error of the Sobel gradients, averaged over nucleus pixels.

    The horizontal map is differentiated horizontally and the vertical map
    vertically. An empty mask gives a zero loss.
    """
    _same_shape(pred, target)
    mask = np.asarray(nucleus_mask, dtype=bool)
    if mask.shape != np.shape(pred)[1:]:
        raise ShapeMismatch(f"mask {mask.shape} vs maps {np.shape(pred)[1:]}")
    pred = np.asarray(pred, dtype=np.float64)
    grad = np.zeros_like(pred)
    m = int(mask.sum())
    if m == 0:
        return 0.0, grad
    value = 0.0
    for ch, axis in ((0, "horizontal"), (1, "vertical")):
        d = raster.sobel(pred[ch], axis) - raster.sobel(target[ch], axis)
        d = np.where(mask, d, 0.0)
        value += float(np.sum(d * d))
        grad[ch] = raster.sobel_adjoint(2.0 * d / m, axis)
    return value / m, grad


def cross_entropy(pred_prob: np.ndarray, target: np.ndarray, clamp: float = CE_CLAMP):
    """Pixel-averaged categorical cross-entropy on clamped probabilities."""
    _same_shape(pred_prob, target)
    p = np.asarray(pred_prob, dtype=np.float64)
    n = p.shape[1] * p.shape[2]
    clipped = np.clip(p, clamp, 1.0)
    value = 0.0 - float(np.sum(target * np.log(clipped)) / n)
    inside = (p >= clamp) & (p <= 1.0)
    grad = np.where(inside, -target / (clipped * n), 0.0)
    return value, grad


def dice_loss(pred_prob: np.ndarray, target: np.ndarray, epsilon: float = DICE_EPS):
    """Soft Dice loss, averaged over channels."""
    _same_shape(pred_prob, target)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    p = np.asarray(pred_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    axes = (1, 2)
    inter = np.sum(p * t, axis=axes)
    denom = np.sum(p, axis=axes) + np.sum(t, axis=axes) + epsilon
    num = 2.0 * inter + epsilon
    c = p.shape[0]
    value = float(np.mean(1.0 - num / denom))
    # d/dp_i of -(num/denom) = -(2 t_i denom - num) / denom^2
    grad = -(2.0 * t * denom[:, None, None] - num[:, None, None]) / (denom ** 2)[:, None, None]
    return value, grad / c


@dataclass
class LossWeights:
    lambda_a: float = 1.0
    lambda_b: float = 2.0
    lambda_c: float = 1.0
    lambda_d: float = 1.0
    lambda_e: float = 1.0
    lambda_f: float = 1.0
    lambda_g: float = 1.0
    lambda_h: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(**{f.name: getattr(self, f.name) * k for f in fields(self)})


TERMS = "abcdefgh"


@dataclass
class LossBreakdown:
    l_a: float
    l_b: float
    l_c: float
    l_d: float
    l_e: float
    l_f: float
    l_g: float
    l_h: float
    total: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def loss_terms(pred: PredictionBundle, target: TargetBundle, nucleus_mask=None):
    """All eight ``(value, grad)`` pairs keyed by term letter."""
    if nucleus_mask is None:
        nucleus_mask = target.nucleus_mask
    return {
        "a": mse_hover(pred.hover, target.hover),
        "b": msge_gradient(pred.hover, target.hover, nucleus_mask),
        "c": cross_entropy(pred.np, target.np),
        "d": dice_loss(pred.np, target.np),
        "e": cross_entropy(pred.nc, target.nc),
        "f": dice_loss(pred.nc, target.nc),
        "g": cross_entropy(pred.ls, target.ls),
        "h": dice_loss(pred.ls, target.ls),
    }


def total_loss(
    pred: PredictionBundle,
    target: TargetBundle,
    weights: LossWeights = LossWeights(),
    nucleus_mask=None,
) -> LossBreakdown:
    """Weighted sum of the HoVer, NP, NC and LS loss terms."""
    terms = loss_terms(pred, target, nucleus_mask)
    values = {k: v for k, (v, _) in terms.items()}
    total = sum(getattr(weights, f"lambda_{k}") * values[k] for k in TERMS)
    return LossBreakdown(**{f"l_{k}": values[k] for k in TERMS}, total=total)


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference relative to the larger gradient's max norm."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _random_probs(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    # bounded logits keep p >= ~0.03, where central differences of log(p)
    # are accurate to ~1e-6 at h = 1e-4
    logits = rng.uniform(-1.0, 1.0, size=(c, h, w))
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def _random_onehot(rng, c, h, w):
    labels = rng.integers(0, c, size=(h, w))
    return (np.arange(c)[:, None, None] == labels[None]).astype(np.float64)


def gradient_check(seed: int = 0, trials: int = 100, size: int = 8, h: float = 1e-4) -> dict[str, float]:
    """Worst relative error between analytic and finite-difference gradients per loss."""
    rng = np.random.default_rng(seed)
    worst = {"mse_hover": 0.0, "msge_gradient": 0.0, "cross_entropy": 0.0, "dice_loss": 0.0}
    for _ in range(trials):
        pred = rng.uniform(-1, 1, size=(2, size, size))
        target = rng.uniform(-1, 1, size=(2, size, size))
        mask = rng.random((size, size)) < 0.5
        _, g = mse_hover(pred, target)
        num = numerical_gradient(lambda x: mse_hover(x, target)[0], pred, h)
        worst["mse_hover"] = max(worst["mse_hover"], relative_error(g, num))
        _, g = msge_gradient(pred, target, mask)
        num = numerical_gradient(lambda x: msge_gradient(x, target, mask)[0], pred, h)
        worst["msge_gradient"] = max(worst["msge_gradient"], relative_error(g, num))

        c = int(rng.integers(2, 6))
        p = _random_probs(rng, c, size, size)
        t = _random_onehot(rng, c, size, size)
        _, g = cross_entropy(p, t)
        num = numerical_gradient(lambda x: cross_entropy(x, t)[0], p, h)
        worst["cross_entropy"] = max(worst["cross_entropy"], relative_error(g, num))
        _, g = dice_loss(p, t)
        num = numerical_gradient(lambda x: dice_loss(x, t)[0], p, h)
        worst["dice_loss"] = max(worst["dice_loss"], relative_error(g, num))
    return worst
