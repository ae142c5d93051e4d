"""
Tests for the per-pixel, mask and mask-classification losses.
"""

import math

import numpy as np
import pytest

from maskcls import engine as E
from maskcls.data import GroundTruth
from maskcls.errors import ConfigError, DomainError, MatchingError, ShapeError
from maskcls.losses import (LossWeights, aux_mask_cls_loss, check_assignment, class_column,
                            classification_loss, dice_loss, dice_lower_bound, focal_loss,
                            mask_cls_loss, mask_loss, per_pixel_ce_loss)
from tests.conftest import make_prediction


@pytest.mark.unit
class TestPerPixelCrossEntropy:

    def test_uniform_scores_give_log_k(self):
        labels = np.array([[1, 2], [3, 1]])
        loss = per_pixel_ce_loss(np.zeros((3, 2, 2)), labels)
        assert loss.item() == pytest.approx(math.log(3))

    def test_confident_correct_scores_approach_zero(self):
        labels = np.array([[1, 2]])
        scores = np.zeros((2, 1, 2))
        scores[0, 0, 0] = scores[1, 0, 1] = 30.0
        assert per_pixel_ce_loss(scores, labels).item() < 1e-10

    def test_labels_outside_range_raise(self):
        with pytest.raises(DomainError):
            per_pixel_ce_loss(np.zeros((2, 1, 2)), np.array([[0, 1]]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            per_pixel_ce_loss(np.zeros((2, 2, 2)), np.ones((3, 3), dtype=int))


@pytest.mark.unit
class TestFocalLoss:

    def test_perfect_prediction_is_near_zero(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert focal_loss(gt, gt).item() < 1e-10

    def test_matches_closed_form(self):
        m = np.array([[0.8, 0.3]])
        gt = np.array([[1.0, 0.0]])
        expected = np.mean([-0.25 * 0.2 ** 2 * math.log(0.8), -0.75 * 0.3 ** 2 * math.log(0.7)])
        assert focal_loss(m, gt).item() == pytest.approx(expected)

    def test_gamma_zero_alpha_half_is_half_bce(self):
        m = np.array([[0.9, 0.2, 0.6]])
        gt = np.array([[1.0, 0.0, 0.0]])
        bce = -np.mean(gt * np.log(m) + (1 - gt) * np.log(1 - m))
        assert focal_loss(m, gt, gamma=0.0, alpha=0.5).item() == pytest.approx(0.5 * bce)

    def test_hard_zero_and_one_are_clamped(self):
        gt = np.array([[1.0, 0.0]])
        value = focal_loss(np.array([[0.0, 1.0]]), gt).item()
        assert np.isfinite(value)
        assert value > 0

    def test_broadcasts_over_leading_axes(self, rng):
        m = rng.uniform(0.1, 0.9, size=(3, 1, 4, 4))
        gt = (rng.random((1, 2, 4, 4)) < 0.5).astype(float)
        out = focal_loss(m, gt)
        assert out.shape == (3, 2)
        assert out.data[1, 0] == pytest.approx(focal_loss(m[1, 0], gt[0, 0]).item())

    def test_non_binary_target_raises(self):
        with pytest.raises(DomainError):
            focal_loss(np.full((2, 2), 0.5), np.full((2, 2), 0.5))


@pytest.mark.unit
class TestDiceLoss:

    def test_perfect_mask_gives_zero(self):
        gt = np.zeros((4, 4))
        gt[:2, :2] = 1.0
        # (2 * 4 + 1) / (4 + 4 + 1) = 1
        assert dice_loss(gt, gt).item() == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_masks(self):
        m = np.zeros((4, 4))
        m[0, 0] = 1.0
        gt = np.zeros((4, 4))
        gt[3, 3] = 1.0
        assert dice_loss(m, gt).item() == pytest.approx(1.0 - 1.0 / 3.0)

    def test_empty_masks_give_zero(self):
        assert dice_loss(np.zeros((3, 3)), np.zeros((3, 3))).item() == pytest.approx(0.0)

    def test_lower_bound_attained_below_zero_for_empty_gt(self):
        bound = dice_lower_bound(np.zeros((2, 2)))
        assert bound == pytest.approx(-1.0)
        assert dice_loss(np.zeros((2, 2)), np.zeros((2, 2))).item() >= bound

    def test_never_below_lower_bound(self, rng):
        gt = (rng.random((5, 6, 6)) < 0.3).astype(float)
        m = rng.random((5, 6, 6))
        assert np.all(dice_loss(m, gt).data >= dice_lower_bound(gt) - 1e-12)


@pytest.mark.unit
class TestClassificationLoss:

    def test_real_class_is_negative_log(self, weights):
        p = np.array([0.5, 0.25, 0.25])
        assert classification_loss(p, 2, weights).item() == pytest.approx(-math.log(0.25))

    def test_no_object_is_down_weighted(self, weights):
        p = np.array([0.5, 0.25, 0.25])
        expected = -0.1 * math.log(0.25)
        assert classification_loss(p, None, weights).item() == pytest.approx(expected)

    def test_class_column_maps_none_to_last(self):
        assert class_column(None, 5) == 5
        assert class_column(1, 5) == 0
        with pytest.raises(DomainError):
            class_column(6, 5)

    def test_loss_weights_validation(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_dice=-1.0)
        with pytest.raises(ConfigError):
            LossWeights(focal_alpha=1.5)


@pytest.mark.unit
class TestCheckAssignment:

    def test_accepts_injective_cover(self):
        assert check_assignment([None, 1, 0], 3, 2) == [None, 1, 0]

    @pytest.mark.parametrize("sigma,n,m", [
        ([0, 0, None], 3, 1),
        ([0, None], 2, 2),
        ([0, 5], 2, 2),
        ([0, 1], 3, 2),
    ])
    def test_rejects_invalid(self, sigma, n, m):
        with pytest.raises(MatchingError):
            check_assignment(sigma, n, m)


@pytest.mark.unit
class TestMaskClsLoss:

    def test_all_no_object_is_class_term_only(self, weights):
        probs = [[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]]
        z = make_prediction(probs, np.full((2, 2, 2), 0.5))
        gt = GroundTruth(np.zeros(0, dtype=int), np.zeros((0, 2, 2), dtype=bool))
        loss = mask_cls_loss(z, gt, [None, None], weights).item()
        expected = -0.1 * (math.log(0.5) + math.log(0.8)) / 2
        assert loss == pytest.approx(expected)

    def test_single_match_adds_mask_term(self, weights, two_segment_gt):
        masks = np.stack([two_segment_gt.masks[1], two_segment_gt.masks[0], np.zeros((4, 4))])
        probs = [[0.1, 0.8, 0.1], [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]
        z = make_prediction(probs, masks.astype(float))
        loss = mask_cls_loss(z, two_segment_gt, [1, 0, None], weights).item()
        class_term = -(math.log(0.8) + math.log(0.7) + 0.1 * math.log(0.8)) / 3
        mask_term = np.mean([mask_loss(masks[0], two_segment_gt.masks[1], weights).item(),
                             mask_loss(masks[1], two_segment_gt.masks[0], weights).item()])
        assert loss == pytest.approx(class_term + mask_term)

    def test_invalid_assignment_raises(self, weights, two_segment_gt):
        z = make_prediction([[0.4, 0.4, 0.2]] * 2, np.full((2, 4, 4), 0.5))
        with pytest.raises(MatchingError):
            mask_cls_loss(z, two_segment_gt, [0, 0], weights)

    def test_uses_logits_when_present(self, weights, two_segment_gt):
        logits = E.Tensor(np.array([[2.0, 0.0, -1.0], [0.0, 1.0, 0.0]]))
        z = make_prediction(E.softmax(logits).data, np.full((2, 4, 4), 0.5))
        with_logits = make_prediction(E.softmax(logits).data, np.full((2, 4, 4), 0.5))
        with_logits.class_logits = logits
        a = mask_cls_loss(z, two_segment_gt, [0, 1], weights).item()
        b = mask_cls_loss(with_logits, two_segment_gt, [0, 1], weights).item()
        assert a == pytest.approx(b)

    def test_gradient_matches_finite_differences(self, weights, two_segment_gt, rng):
        logits0 = rng.standard_normal((3, 3))
        masks0 = rng.standard_normal((3, 4, 4))

        def loss_of_logits(x):
            from maskcls.model import PredictionSet

            z = PredictionSet(class_probs=E.softmax(x, axis=-1),
                              mask_probs=E.sigmoid(masks0), class_logits=x)
            return mask_cls_loss(z, two_segment_gt, [None, 0, 1], weights)

        assert E.grad_check(loss_of_logits, logits0) < 1e-6

    def test_aux_loss_sums_layers(self, weights, two_segment_gt):
        z = make_prediction([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.3, 0.3, 0.4]],
                            np.stack([two_segment_gt.masks[0], two_segment_gt.masks[1],
                                      np.zeros((4, 4))]).astype(float))
        single = aux_mask_cls_loss([z], two_segment_gt, weights).item()
        double = aux_mask_cls_loss([z, z], two_segment_gt, weights).item()
        assert double == pytest.approx(2 * single)

    def test_aux_loss_needs_layers(self, weights, two_segment_gt):
        with pytest.raises(ValueError):
            aux_mask_cls_loss([], two_segment_gt, weights)


@pytest.mark.unit
class TestLossInvariances:

    def test_joint_permutation_of_queries_and_assignment(self, weights, two_segment_gt, rng):
        probs = rng.dirichlet(np.ones(3), size=5)
        masks = rng.uniform(0.05, 0.95, size=(5, 4, 4))
        sigma = [None, 1, None, 0, None]
        base = mask_cls_loss(make_prediction(probs, masks), two_segment_gt, sigma,
                             weights).item()
        for _ in range(5):
            order = rng.permutation(5)
            permuted = make_prediction(probs[order], masks[order])
            permuted_sigma = [sigma[i] for i in order]
            assert mask_cls_loss(permuted, two_segment_gt, permuted_sigma,
                                 weights).item() == pytest.approx(base, rel=1e-12)

    @pytest.mark.parametrize("weight", [0.0, 0.05, 0.1, 0.5, 1.0])
    def test_no_object_term_scales_with_its_weight(self, weight):
        p = np.array([0.5, 0.2, 0.3])
        loss = classification_loss(p, None, LossWeights(no_object_weight=weight)).item()
        assert loss == pytest.approx(-weight * math.log(0.3))

    def test_no_object_weight_leaves_real_classes_alone(self):
        p = np.array([0.5, 0.2, 0.3])
        low = classification_loss(p, 1, LossWeights(no_object_weight=0.1)).item()
        high = classification_loss(p, 1, LossWeights(no_object_weight=1.0)).item()
        assert low == high == pytest.approx(-math.log(0.5))

    def test_unmatched_slots_scale_the_class_term(self, two_segment_gt):
        probs = [[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.1, 0.1, 0.8]]
        masks = two_segment_gt.masks.astype(float)
        z = make_prediction(probs, np.concatenate([masks, np.zeros((1, 4, 4))]))
        sigma = [0, 1, None]
        light = mask_cls_loss(z, two_segment_gt, sigma, LossWeights(no_object_weight=0.1))
        heavy = mask_cls_loss(z, two_segment_gt, sigma, LossWeights(no_object_weight=0.3))
        assert heavy.item() - light.item() == pytest.approx(-0.2 * math.log(0.8) / 3)
