import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hoverpipe import metrics
from hoverpipe.errors import MissingClass, ShapeMismatch

from conftest import paint
from oracles import brute_aji, brute_pq

SQUARE = [(1, 1), (1, 2), (2, 1), (2, 2)]


def gt_square():
    return paint((6, 6), SQUARE)


def pred_06():
    return paint((6, 6), [(1, 1), (1, 2), (2, 1), (2, 3)])


def label_maps(max_labels=3):
    return arrays(np.uint32, (8, 8), elements=st.integers(0, max_labels))


class TestMatching:
    def test_identical(self):
        m = metrics.match_instances(gt_square(), gt_square())
        assert m.pairs == [(1, 1, 1.0)]
        assert m.unmatched_gt == [] and m.unmatched_pred == []

    def test_iou_06_matched(self):
        m = metrics.match_instances(gt_square(), pred_06())
        assert len(m.pairs) == 1 and m.pairs[0][2] == pytest.approx(0.6)

    def test_iou_exactly_half_not_matched(self):
        gt = paint((6, 6), [(r, c) for r in (1, 2) for c in range(4)])
        pred = paint((6, 6), [(r, c) for r in (1, 2) for c in range(2)])
        g, p = gt > 0, pred > 0
        assert (g & p).sum() == 4 and (g | p).sum() == 8
        m = metrics.match_instances(gt, pred)
        assert m.pairs == [] and m.unmatched_gt == [1] and m.unmatched_pred == [1]

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            metrics.match_instances(np.zeros((3, 3)), np.zeros((3, 4)))

    @given(label_maps(), label_maps())
    @settings(max_examples=200)
    def test_one_to_one(self, gt, pred):
        m = metrics.match_instances(gt, pred)
        gs = [p[0] for p in m.pairs]
        ps = [p[1] for p in m.pairs]
        assert len(set(gs)) == len(gs) and len(set(ps)) == len(ps)
        assert all(p[2] > 0.5 for p in m.pairs)


class TestPanoptic:
    def test_identical(self):
        gt = paint((6, 6), SQUARE, [(4, 4)])
        assert metrics.panoptic_quality(metrics.match_instances(gt, gt)) == (1.0, 1.0, 1.0)

    def test_single_pair(self):
        dq, sq, pq = metrics.panoptic_quality(metrics.match_instances(gt_square(), pred_06()))
        assert dq == 1.0 and sq == pytest.approx(0.6) and pq == pytest.approx(0.6)

    def test_one_of_two_found(self):
        m = metrics.InstanceMatching(pairs=[(1, 1, 0.8)], unmatched_gt=[2], unmatched_pred=[])
        dq, sq, pq = metrics.panoptic_quality(m)
        assert dq == pytest.approx(2 / 3) and pq == pytest.approx(0.8 * 2 / 3)

    def test_conventions(self):
        empty = np.zeros((4, 4), np.uint32)
        assert metrics.panoptic_quality(metrics.match_instances(empty, empty)) == (1.0, 1.0, 1.0)
        dq, sq, pq = metrics.panoptic_quality(metrics.match_instances(gt_square(), np.zeros((6, 6))))
        assert (dq, sq, pq) == (0.0, 0.0, 0.0)


class TestAji:
    def test_identical(self):
        assert metrics.aggregated_jaccard(gt_square(), gt_square()) == 1.0

    def test_disjoint(self):
        assert metrics.aggregated_jaccard(gt_square(), paint((6, 6), [(4, 4), (4, 5)])) == 0.0

    def test_hand_value(self):
        assert metrics.aggregated_jaccard(gt_square(), pred_06()) == pytest.approx(0.6)

    def test_prediction_used_once(self):
        # both gt objects overlap the single prediction; only the first may use it
        gt = paint((1, 6), [(0, 0), (0, 1), (0, 2)], [(0, 3), (0, 4), (0, 5)])
        pred = paint((1, 6), [(0, c) for c in range(6)])
        assert metrics.aggregated_jaccard(gt, pred) == pytest.approx(3 / (6 + 3))

    def test_empty(self):
        e = np.zeros((3, 3), np.uint32)
        assert metrics.aggregated_jaccard(e, e) == 1.0

    @given(label_maps(), label_maps())
    @settings(max_examples=200)
    def test_matches_oracle(self, gt, pred):
        assert metrics.aggregated_jaccard(gt, pred) == pytest.approx(float(brute_aji(gt, pred)), rel=1e-12)


class TestDice:
    def test_cases(self):
        a = paint((4, 4), [(0, 0), (0, 1), (0, 2), (0, 3)])
        b = paint((4, 4), [(0, 2), (0, 3), (1, 0), (1, 1)])
        c = paint((4, 4), [(3, 0), (3, 1), (3, 2), (3, 3)])
        assert metrics.binary_dice(a, a) == 1.0
        assert metrics.binary_dice(a, c) == 0.0
        assert metrics.binary_dice(a, b) == 0.5
        assert metrics.binary_dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0

    @given(label_maps(), label_maps())
    def test_symmetric(self, a, b):
        assert metrics.binary_dice(a, b) == metrics.binary_dice(b, a)


class TestFScores:
    def test_perfect(self):
        gt = paint((6, 6), SQUARE, [(4, 4)])
        m = metrics.match_instances(gt, gt)
        classes = {1: "basal", 2: "other"}
        f_d, f_c, absent = metrics.f_scores(m, classes, classes)
        assert f_d == 1.0 and all(v == 1.0 for v in f_c.values())
        assert set(absent) == {"epithelium", "keratin"}

    def test_misclassified_basal(self):
        pairs = [(1, 1, 0.9), (2, 2, 0.9), (3, 3, 0.9)]
        m = metrics.InstanceMatching(pairs, [], [])
        gt = {1: "basal", 2: "basal", 3: "other"}
        pred = {1: "basal", 2: "epithelium", 3: "other"}
        _, f_c, _ = metrics.f_scores(m, gt, pred)
        assert f_c["basal"] == pytest.approx(2 / (2 + 0 + 1))
        assert f_c["epithelium"] == 0.0 and f_c["other"] == 1.0
        # the only basal nucleus misclassified
        gt1 = {1: "basal", 2: "other", 3: "other"}
        pred1 = {1: "epithelium", 2: "other", 3: "other"}
        _, f_c, _ = metrics.f_scores(m, gt1, pred1)
        assert f_c["basal"] == 0.0

    def test_detection_counting(self):
        m = metrics.InstanceMatching([(1, 1, 0.9)], [2], [])
        f_d, _, _ = metrics.f_scores(m, {1: "other", 2: "other"}, {1: "other"})
        assert f_d == pytest.approx(2 / 3)

    def test_missing_class(self):
        m = metrics.InstanceMatching([(1, 1, 0.9)], [], [])
        with pytest.raises(MissingClass):
            metrics.f_scores(m, {1: "other"}, {})


class TestLayers:
    def test_identical(self):
        lay = np.arange(25).reshape(5, 5) % 5
        r = metrics.layer_metrics(lay, lay)
        assert r["accuracy"] == 1.0 and all(v["f1"] == 1.0 for v in r["per_class"].values())

    def test_all_background_prediction(self):
        gt = np.zeros((4, 4), int)
        gt[2:] = 3
        r = metrics.layer_metrics(gt, np.zeros((4, 4), int))
        assert r["accuracy"] == 0.5
        assert r["per_class"]["background"]["f1"] == pytest.approx(2 / 3)
        assert r["per_class"]["epithelium"]["f1"] == 0.0
        assert r["mean_f1"] == pytest.approx((2 / 3 + 0 + 3) / 5)
        assert set(r["absent"]) == {"other", "basal", "keratin"}

    @given(arrays(np.uint8, (6, 6), elements=st.integers(0, 4)), arrays(np.uint8, (6, 6), elements=st.integers(0, 4)))
    def test_swap_swaps_precision_recall(self, a, b):
        ra, rb = metrics.layer_metrics(a, b), metrics.layer_metrics(b, a)
        for name in ra["per_class"]:
            if name in ra["absent"]:
                continue
            assert ra["per_class"][name]["precision"] == rb["per_class"][name]["recall"]
            assert ra["per_class"][name]["f1"] == rb["per_class"][name]["f1"]


class TestInvariants:
    @given(label_maps(), label_maps())
    @settings(max_examples=300)
    def test_pq_matches_oracle_and_product(self, gt, pred):
        dq, sq, pq = metrics.panoptic_quality(metrics.match_instances(gt, pred))
        odq, osq, opq = brute_pq(gt, pred)
        assert dq == pytest.approx(float(odq), rel=1e-12)
        assert sq == pytest.approx(float(osq), rel=1e-12)
        assert pq == dq * sq

    @given(label_maps(), label_maps(), st.permutations([1, 2, 3]), st.permutations([1, 2, 3]))
    @settings(max_examples=200)
    def test_relabel_invariance(self, gt, pred, pg, pp):
        lut_g = np.array([0] + list(pg), np.uint32)
        lut_p = np.array([0] + list(pp), np.uint32)
        a = metrics.evaluate(gt, pred)
        b = metrics.evaluate(lut_g[gt], lut_p[pred])
        # aji is left out: its greedy pass is defined in gt label order
        for k in ("dice", "dq", "sq", "pq", "f_d"):
            assert a[k] == pytest.approx(b[k], rel=1e-12)


class TestAggregation:
    def _tiles(self):
        out = []
        for seed in range(4):
            r = np.random.default_rng(seed)
            gt = r.integers(0, 3, (8, 8)).astype(np.uint32)
            pred = gt.copy()
            pred[r.random((8, 8)) < 0.2] = 0
            lay = r.integers(0, 5, (8, 8))
            out.append(dict(gt=gt, pred=pred, gt_layers=lay, pred_layers=np.where(r.random((8, 8)) < .8, lay, 0)))
        return out

    def test_pooled_equals_concatenated_counts(self):
        tiles = self._tiles()
        pooled = metrics.evaluate_many(tiles, "pooled")
        cm = sum(metrics.confusion_matrix(t["gt_layers"], t["pred_layers"]) for t in tiles)
        assert pooled["layer"]["accuracy"] == pytest.approx(np.trace(cm) / cm.sum())
        assert pooled["pq"] == pooled["dq"] * pooled["sq"]

    def test_mean_mode(self):
        tiles = self._tiles()
        mean = metrics.evaluate_many(tiles, "mean")
        per = [metrics.evaluate(**t) for t in tiles]
        assert mean["aji"] == pytest.approx(np.mean([p["aji"] for p in per]))

    def test_report_ranges(self):
        for t in self._tiles():
            r = metrics.evaluate(**t)
            for k in ("dice", "aji", "dq", "sq", "pq", "f_d"):
                assert 0.0 <= r[k] <= 1.0
