"""
Tests for mIoU, panoptic quality and query statistics.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from maskcls.errors import DomainError, ShapeError
from maskcls.inference import InferenceConfig, general_inference
from maskcls.metrics import (ConfusionMatrix, MetricReport, PQStat, evaluate_semantic, miou,
                             panoptic_quality, panoptic_stats, pq_stuff_semantic,
                             query_class_stats)
from tests.conftest import make_prediction


@pytest.fixture
def semantic_pair():
    """Top half class 1, bottom half class 2; two pixels of each class mispredicted."""
    gt = np.array([[1, 1, 1, 1],
                   [1, 1, 1, 1],
                   [2, 2, 2, 2],
                   [2, 2, 2, 2]])
    pred = np.array([[1, 1, 1, 1],
                     [1, 1, 2, 2],
                     [2, 2, 2, 2],
                     [2, 2, 0, 0]])
    return pred, gt


@pytest.fixture
def panoptic_pair():
    """Stuff class 1 background plus two class-3 instances, the small one missed."""
    gt_ids = np.array([[1, 1, 1, 1],
                       [1, 2, 2, 1],
                       [1, 2, 2, 1],
                       [3, 3, 1, 1]])
    pred_ids = np.array([[1, 1, 1, 1],
                         [1, 2, 2, 1],
                         [1, 2, 2, 1],
                         [1, 1, 1, 1]])
    return (pred_ids, {1: 1, 2: 3}), (gt_ids, {1: 1, 2: 3, 3: 3})


@pytest.mark.unit
class TestMeanIoU:

    def test_hand_case(self, semantic_pair):
        report = miou(*semantic_pair, num_classes=2)
        assert report.per_class_iou == pytest.approx([6 / 8, 6 / 10])
        assert report.miou == pytest.approx(0.675)
        assert report.pixel_accuracy == pytest.approx(12 / 16)

    def test_perfect_prediction(self, semantic_pair):
        _, gt = semantic_pair
        assert miou(gt, gt, 2).miou == 1.0

    def test_absent_class_is_excluded(self):
        gt = np.ones((2, 2), dtype=int)
        report = miou(gt, gt, 5)
        assert report.per_class_iou[1:] == [None] * 4
        assert report.miou == 1.0

    def test_void_ground_truth_ignored(self):
        gt = np.array([[0, 1], [1, 1]])
        pred = np.array([[2, 1], [1, 1]])
        assert miou(pred, gt, 2).miou == 1.0

    def test_dataset_level_not_per_image_mean(self):
        gt = [np.array([[1, 1, 1, 1]]), np.array([[2, 2, 2, 2]])]
        pred = [np.array([[1, 1, 1, 2]]), np.array([[2, 2, 2, 2]])]
        report = miou(pred, gt, 2)
        assert report.per_class_iou == pytest.approx([3 / 4, 4 / 5])

    def test_merged_confusion_matrices_equal_single_pass(self, rng):
        preds = [rng.integers(0, 4, size=(5, 5)) for _ in range(4)]
        gts = [rng.integers(1, 4, size=(5, 5)) for _ in range(4)]
        whole = ConfusionMatrix(3)
        for p, g in zip(preds, gts):
            whole.add(p, g)
        left, right = ConfusionMatrix(3), ConfusionMatrix(3)
        for p, g in zip(preds[:2], gts[:2]):
            left.add(p, g)
        for p, g in zip(preds[2:], gts[2:]):
            right.add(p, g)
        left += right
        np.testing.assert_array_equal(left.matrix, whole.matrix)

    def test_label_out_of_range_raises(self):
        with pytest.raises(DomainError):
            miou(np.array([[3]]), np.array([[1]]), 2)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            miou(np.zeros((2, 2), dtype=int), np.ones((3, 3), dtype=int), 2)


@pytest.mark.unit
class TestPanopticQuality:

    def test_stuff_semantic_hand_case(self, semantic_pair):
        report = pq_stuff_semantic(*semantic_pair, num_classes=2)
        assert report.sq == pytest.approx(0.675)
        assert report.rq == pytest.approx(1.0)
        assert report.pq == pytest.approx(0.675)

    def test_evaluate_semantic_merges_both(self, semantic_pair):
        report = evaluate_semantic([semantic_pair[0]], [semantic_pair[1]], 2)
        assert report.miou == pytest.approx(0.675)
        assert report.pq == pytest.approx(0.675)

    def test_things_and_stuff_hand_case(self, panoptic_pair):
        report = panoptic_quality(*panoptic_pair, num_classes=3, thing_classes=[3])
        assert report.per_class_pq[1]["sq"] == pytest.approx(10 / 12)
        assert report.per_class_pq[3]["rq"] == pytest.approx(2 / 3)
        assert report.sq == pytest.approx((10 / 12 + 1.0) / 2)
        assert report.rq == pytest.approx(0.8)
        assert report.pq == pytest.approx(report.sq * report.rq)
        assert report.pq_things == pytest.approx(2 / 3)
        assert report.pq_stuff == pytest.approx(10 / 12)
        assert report.pq_class_averaged == pytest.approx((10 / 12 + 2 / 3) / 2)

    def test_segment_on_void_is_not_a_false_positive(self):
        gt = (np.array([[0, 0], [1, 1]]), {1: 1})
        pred = (np.array([[1, 1], [2, 2]]), {1: 2, 2: 1})
        stat = panoptic_stats(pred, gt)
        assert stat.classes() == [1]
        assert stat[1].tp == 1

    def test_void_removed_from_union(self):
        gt = (np.array([[0, 1], [1, 1]]), {1: 1})
        pred = (np.ones((2, 2), dtype=int), {1: 1})
        stat = panoptic_stats(pred, gt)
        assert stat[1].iou == pytest.approx(1.0)

    def test_iou_at_half_is_not_a_match(self):
        gt = (np.array([[1, 1, 2, 2]]), {1: 1, 2: 2})
        pred = (np.array([[1, 1, 1, 1]]), {1: 1})
        stat = panoptic_stats(pred, gt)
        assert stat[1].tp == 0
        assert stat[1].fp == 1 and stat[1].fn == 1

    def test_undeclared_segment_raises(self):
        with pytest.raises(DomainError):
            panoptic_stats((np.array([[5]]), {}), (np.array([[1]]), {1: 1}))

    def test_accepts_objects_with_segments(self, panoptic_pair):
        (pred_ids, pred_classes), (gt_ids, gt_classes) = panoptic_pair

        def wrap(ids, classes):
            segments = [SimpleNamespace(id=i, class_id=c) for i, c in classes.items()]
            return SimpleNamespace(segment_ids=ids, segments=segments)

        a = panoptic_quality([wrap(pred_ids, pred_classes)], [wrap(gt_ids, gt_classes)], 3, [3])
        b = panoptic_quality(*panoptic_pair, num_classes=3, thing_classes=[3])
        assert a.pq == pytest.approx(b.pq)

    def test_pq_stat_merge_is_order_free(self, panoptic_pair):
        a = panoptic_stats(*panoptic_pair)
        b = panoptic_stats(*panoptic_pair)
        c = PQStat()
        c += a
        c += b
        assert c[3].fn == 2
        assert c.pooled(c.classes())["pq"] == pytest.approx(a.pooled(a.classes())["pq"])

    def test_report_is_json_ready(self, panoptic_pair):
        payload = panoptic_quality(*panoptic_pair, num_classes=3, thing_classes=[3]).to_dict()
        assert set(payload["per_class_pq"]) == {"1", "3"}

    def test_merged_fills_gaps_only(self):
        a = MetricReport(num_classes=2, miou=0.5)
        b = MetricReport(num_classes=2, miou=0.9, pq=0.4)
        merged = a.merged(b)
        assert merged.miou == 0.5
        assert merged.pq == 0.4


@pytest.mark.unit
class TestQueryClassStats:

    def test_counts_distinct_classes_per_slot(self):
        def output(*segments):
            return SimpleNamespace(segments=[SimpleNamespace(class_id=c, queries=q)
                                             for c, q in segments])

        outputs = [output((1, (0,)), (2, (1, 2))), output((3, (0,)), (2, (1,)))]
        stats = query_class_stats(outputs, num_queries=4)
        assert stats["counts"] == [2, 1, 1, 0]
        assert stats["per_query"][0] == {"query": 0, "count": 2, "classes": [1, 3]}
        assert stats["distinct_classes"] == 3


@pytest.mark.unit
class TestPanopticOracles:

    @pytest.mark.parametrize("covered,expected", [(6, 0.6), (4, 0.0)])
    def test_single_segment_iou_cases(self, covered, expected):
        gt = (np.ones((1, 10), dtype=int), {1: 1})
        pred_ids = np.zeros((1, 10), dtype=int)
        pred_ids[0, :covered] = 1
        report = panoptic_quality((pred_ids, {1: 1}), gt, num_classes=1)
        assert report.pq == pytest.approx(expected)

    def test_pq_equals_sq_times_rq_on_random_pairs(self, rng):
        for _ in range(100):
            pairs = []
            for _ in range(2):
                ids = rng.integers(0, 5, size=(6, 6))
                pairs.append((ids, {i: int(rng.integers(1, 4)) for i in range(1, 5)}))
            report = panoptic_quality(pairs[0], pairs[1], num_classes=3, thing_classes=[2])
            assert report.pq == pytest.approx(report.sq * report.rq, abs=1e-12)


@pytest.mark.unit
class TestMetricInvariances:

    def test_miou_ignores_consistent_relabeling(self, rng):
        k = 5
        for _ in range(20):
            gt = rng.integers(1, k + 1, size=(8, 8))
            pred = rng.integers(0, k + 1, size=(8, 8))
            perm = np.concatenate([[0], rng.permutation(k) + 1])
            base = miou(pred, gt, k)
            relabeled = miou(perm[pred], perm[gt], k)
            assert relabeled.miou == pytest.approx(base.miou, abs=1e-12)
            for c in range(1, k + 1):
                assert relabeled.per_class_iou[perm[c] - 1] == base.per_class_iou[c - 1]

    def test_single_surviving_query_counts_once(self):
        masks = np.zeros((3, 4, 4))
        masks[2] = 0.9
        probs = [[0.05, 0.05, 0.05, 0.85], [0.1, 0.1, 0.1, 0.7], [0.02, 0.03, 0.9, 0.05]]
        output = general_inference(make_prediction(probs, masks), InferenceConfig())
        stats = query_class_stats([output], num_queries=3)
        assert stats["counts"] == [1, 0, 0]
        assert stats["per_query"][0] == {"query": 2, "count": 1, "classes": [3]}
        assert stats["distinct_classes"] == 1
