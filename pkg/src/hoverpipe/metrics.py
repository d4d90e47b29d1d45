"""Instance, classification and layer evaluation metrics.

Every metric is computed from raw counts (``TileCounts``) first, so tiles
evaluated independently can be pooled by adding counts before finalising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MissingClass, ShapeMismatch
from .hover import LAYER_CLASSES

MATCH_IOU = 0.5
FC_CLASSES = ("other", "basal", "epithelium", "keratin")
FC_SUMMARY = ("other", "basal", "epithelium")  # keratin nuclei are too rare to summarise


@dataclass
class InstanceMatching:
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]


def _check_extent(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"maps disagree on extent: {np.shape(a)} vs {np.shape(b)}")


def overlap_table(gt: np.ndarray, pred: np.ndarray):
    """Sorted gt ids, pred ids, their areas and pairwise intersection counts."""
    gt = np.asarray(gt).astype(np.int64)
    pred = np.asarray(pred).astype(np.int64)
    _check_extent(gt, pred)
    g_ids, g_inv, g_area = np.unique(gt, return_inverse=True, return_counts=True)
    p_ids, p_inv, p_area = np.unique(pred, return_inverse=True, return_counts=True)
    inter = np.zeros((g_ids.size, p_ids.size), dtype=np.int64)
    np.add.at(inter, (g_inv.ravel(), p_inv.ravel()), 1)
    g_keep = g_ids > 0
    p_keep = p_ids > 0
    return (g_ids[g_keep], p_ids[p_keep], g_area[g_keep], p_area[p_keep],
            inter[np.ix_(g_keep, p_keep)])


def match_instances(gt: np.ndarray, pred: np.ndarray) -> InstanceMatching:
    """Pair every (gt, pred) with IoU strictly above 0.5.

    Such pairs are one-to-one by construction: an object cannot share more
    than half of the union with two disjoint objects.
    """
    g_ids, p_ids, g_area, p_area, inter = overlap_table(gt, pred)
    union = g_area[:, None] + p_area[None, :] - inter
    pairs = []
    gi_matched, pi_matched = set(), set()
    for gi, pi in zip(*np.nonzero(2 * inter > union)):
        pairs.append((int(g_ids[gi]), int(p_ids[pi]), float(inter[gi, pi] / union[gi, pi])))
        gi_matched.add(int(g_ids[gi]))
        pi_matched.add(int(p_ids[pi]))
    return InstanceMatching(
        pairs=pairs,
        unmatched_gt=[int(g) for g in g_ids if int(g) not in gi_matched],
        unmatched_pred=[int(p) for p in p_ids if int(p) not in pi_matched],
    )


def _pq_from_counts(tp: int, fp: int, fn: int, iou_sum: float):
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = iou_sum / tp if tp else 0.0
    return dq, sq, dq * sq


def panoptic_quality(matching: InstanceMatching) -> tuple[float, float, float]:
    """Detection, segmentation and panoptic quality of a matching."""
    return _pq_from_counts(len(matching.pairs), len(matching.unmatched_pred),
                           len(matching.unmatched_gt), sum(p[2] for p in matching.pairs))


def aji_counts(gt: np.ndarray, pred: np.ndarray) -> tuple[int, int]:
    """Aggregated intersection and union for the AJI.

    Ground-truth objects are visited in ascending label order; each takes
    the unused overlapping prediction with the highest IoU (lower label on
    ties). Predictions are used at most once.
    """
    g_ids, p_ids, g_area, p_area, inter = overlap_table(gt, pred)
    union = g_area[:, None] + p_area[None, :] - inter
    used = np.zeros(p_ids.size, dtype=bool)
    c = u = 0
    for gi in range(g_ids.size):
        cand = np.flatnonzero((inter[gi] > 0) & ~used)
        if cand.size == 0:
            u += int(g_area[gi])
            continue
        # compare inter/union exactly by cross-multiplication
        best = cand[0]
        for pi in cand[1:]:
            if inter[gi, pi] * union[gi, best] > inter[gi, best] * union[gi, pi]:
                best = pi
        used[best] = True
        c += int(inter[gi, best])
        u += int(union[gi, best])
    u += int(p_area[~used].sum())
    return c, u


def _aji_from_counts(c: int, u: int) -> float:
    return 1.0 if u == 0 else c / u


def aggregated_jaccard(gt: np.ndarray, pred: np.ndarray) -> float:
    return _aji_from_counts(*aji_counts(gt, pred))


def binary_dice(gt: np.ndarray, pred: np.ndarray) -> float:
    _check_extent(gt, pred)
    a = np.asarray(gt) > 0
    b = np.asarray(pred) > 0
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2 * int((a & b).sum()) / denom


def _f1(tp: int, fp: int, fn: int):
    """F1 and a flag telling whether the class was absent on both sides."""
    if tp + fp + fn == 0:
        return 1.0, True
    return 2 * tp / (2 * tp + fp + fn), False


def classification_counts(
    matching: InstanceMatching,
    gt_classes: Mapping[int, str],
    pred_classes: Mapping[int, str],
    classes: Sequence[str] = FC_CLASSES,
) -> dict[str, tuple[int, int, int]]:
    def cls_of(table, label, side):
        try:
            return table[label]
        except KeyError:
            raise MissingClass(f"{side} label {label} has no class") from None

    counts = {}
    paired_g = {g for g, _, _ in matching.pairs}
    paired_p = {p for _, p, _ in matching.pairs}
    for t in classes:
        tp = sum(1 for g, p, _ in matching.pairs
                 if cls_of(gt_classes, g, "gt") == t and cls_of(pred_classes, p, "pred") == t)
        n_pred = sum(1 for p in matching.unmatched_pred if cls_of(pred_classes, p, "pred") == t)
        n_pred += sum(1 for p in paired_p if cls_of(pred_classes, p, "pred") == t)
        n_gt = sum(1 for g in matching.unmatched_gt if cls_of(gt_classes, g, "gt") == t)
        n_gt += sum(1 for g in paired_g if cls_of(gt_classes, g, "gt") == t)
        counts[t] = (tp, n_pred - tp, n_gt - tp)
    return counts


def f_scores(
    matching: InstanceMatching,
    gt_classes: Mapping[int, str],
    pred_classes: Mapping[int, str],
):
    """Detection F1 and per-class one-vs-rest instance F1.

    Returns ``(f_d, f_c, absent)`` where ``absent`` lists classes that occur
    on neither side (their F1 is reported as 1.0).
    """
    f_d, _ = _f1(len(matching.pairs), len(matching.unmatched_pred), len(matching.unmatched_gt))
    f_c, absent = {}, []
    for t, (tp, fp, fn) in classification_counts(matching, gt_classes, pred_classes).items():
        f_c[t], flag = _f1(tp, fp, fn)
        if flag:
            absent.append(t)
    return f_d, f_c, absent


def confusion_matrix(gt_layers: np.ndarray, pred_layers: np.ndarray, n: int = 5) -> np.ndarray:
    _check_extent(gt_layers, pred_layers)
    g = np.asarray(gt_layers).astype(np.int64).ravel()
    p = np.asarray(pred_layers).astype(np.int64).ravel()
    return np.bincount(g * n + p, minlength=n * n).reshape(n, n)


def _layer_from_confusion(cm: np.ndarray):
    per_class, absent = {}, []
    for k, name in enumerate(LAYER_CLASSES):
        tp = int(cm[k, k])
        fp = int(cm[:, k].sum()) - tp
        fn = int(cm[k, :].sum()) - tp
        f1, flag = _f1(tp, fp, fn)
        if flag:
            absent.append(name)
            precision = recall = 1.0
        else:
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
        per_class[name] = {"precision": precision, "recall": recall, "f1": f1}
    total = int(cm.sum())
    accuracy = 1.0 if total == 0 else int(np.trace(cm)) / total
    mean_f1 = sum(v["f1"] for v in per_class.values()) / len(per_class)
    return per_class, accuracy, mean_f1, absent


def layer_metrics(gt_layers: np.ndarray, pred_layers: np.ndarray) -> dict:
    """Pixel-level one-vs-rest precision/recall/F1, accuracy and mean F1."""
    per_class, accuracy, mean_f1, absent = _layer_from_confusion(confusion_matrix(gt_layers, pred_layers))
    return {"per_class": per_class, "accuracy": accuracy, "mean_f1": mean_f1, "absent": absent}


@dataclass
class TileCounts:
    """Additive raw counts behind every reported metric."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    aji_c: int = 0
    aji_u: int = 0
    dice_inter: int = 0
    dice_total: int = 0
    class_counts: dict = field(default_factory=lambda: {t: (0, 0, 0) for t in FC_CLASSES})
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((5, 5), dtype=np.int64))
    has_classes: bool = False
    has_layers: bool = False

    def __add__(self, other: "TileCounts") -> "TileCounts":
        return TileCounts(
            tp=self.tp + other.tp, fp=self.fp + other.fp, fn=self.fn + other.fn,
            iou_sum=self.iou_sum + other.iou_sum,
            aji_c=self.aji_c + other.aji_c, aji_u=self.aji_u + other.aji_u,
            dice_inter=self.dice_inter + other.dice_inter,
            dice_total=self.dice_total + other.dice_total,
            class_counts={t: tuple(a + b for a, b in zip(self.class_counts[t], other.class_counts[t]))
                          for t in FC_CLASSES},
            confusion=self.confusion + other.confusion,
            has_classes=self.has_classes or other.has_classes,
            has_layers=self.has_layers or other.has_layers,
        )


def tile_counts(gt, pred, gt_classes=None, pred_classes=None, gt_layers=None, pred_layers=None) -> TileCounts:
    matching = match_instances(gt, pred)
    c, u = aji_counts(gt, pred)
    a = np.asarray(gt) > 0
    b = np.asarray(pred) > 0
    counts = TileCounts(
        tp=len(matching.pairs), fp=len(matching.unmatched_pred), fn=len(matching.unmatched_gt),
        iou_sum=sum(p[2] for p in matching.pairs), aji_c=c, aji_u=u,
        dice_inter=int((a & b).sum()), dice_total=int(a.sum()) + int(b.sum()),
    )
    if gt_classes is not None and pred_classes is not None:
        counts.class_counts = classification_counts(matching, gt_classes, pred_classes)
        counts.has_classes = True
    if gt_layers is not None and pred_layers is not None:
        counts.confusion = confusion_matrix(gt_layers, pred_layers)
        counts.has_layers = True
    return counts


def report_from_counts(counts: TileCounts) -> dict:
    """Finalise counts into the metrics report dictionary."""
    dq, sq, pq = _pq_from_counts(counts.tp, counts.fp, counts.fn, counts.iou_sum)
    flags = []
    report = {
        "dice": 1.0 if counts.dice_total == 0 else 2 * counts.dice_inter / counts.dice_total,
        "aji": _aji_from_counts(counts.aji_c, counts.aji_u),
        "dq": dq, "sq": sq, "pq": pq,
        "f_d": _f1(counts.tp, counts.fp, counts.fn)[0],
    }
    if counts.has_classes:
        for t in FC_CLASSES:
            report[f"f_c_{t}"], absent = _f1(*counts.class_counts[t])
            if absent:
                flags.append(f"f_c_{t}_absent")
    if counts.has_layers:
        per_class, accuracy, mean_f1, absent = _layer_from_confusion(counts.confusion)
        report["layer"] = dict(per_class, accuracy=accuracy, mean_f1=mean_f1)
        flags.extend(f"layer_{name}_absent" for name in absent)
    report["flags"] = flags
    return report


def evaluate(gt, pred, gt_classes=None, pred_classes=None, gt_layers=None, pred_layers=None) -> dict:
    """Full metrics report for one tile."""
    return report_from_counts(tile_counts(gt, pred, gt_classes, pred_classes, gt_layers, pred_layers))


def evaluate_many(tiles: Sequence[dict], mode: str = "pooled") -> dict:
    """Aggregate over tiles, either by pooling counts or averaging per-tile scores.

    Each entry of ``tiles`` holds keyword arguments for :func:`tile_counts`.
    """
    per_tile = [tile_counts(**t) for t in tiles]
    if mode == "pooled":
        total = TileCounts()
        for c in per_tile:
            total = total + c
        return report_from_counts(total)
    if mode == "mean":
        reports = [report_from_counts(c) for c in per_tile]
        return _mean_reports(reports)
    raise ValueError(f"mode must be 'pooled' or 'mean', got {mode!r}")


def _mean_reports(reports):
    out = {}
    for key, value in reports[0].items():
        if key == "flags":
            out[key] = sorted({f for r in reports for f in r["flags"]})
        elif isinstance(value, dict):
            out[key] = _mean_reports([r[key] for r in reports])
        else:
            out[key] = float(np.mean([r[key] for r in reports]))
    return out


def summary_f_c(report: dict) -> float:
    """Mean classification F1 over the summarised nucleus classes."""
    return float(np.mean([report[f"f_c_{t}"] for t in FC_SUMMARY]))
