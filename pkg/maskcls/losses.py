"""
Training losses.

Per-pixel cross-entropy for the per-pixel baselines, and the mask
classification loss: a weighted classification term per prediction slot plus
a focal + dice mask term per matched ground-truth segment. Mask losses accept
stacked masks ``(..., H, W)`` and reduce only the last two axes, so the
matcher's cost matrix is computed by the same code.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence

import numpy as np

from . import engine as E
from .data import GroundTruth
from .engine import SIGMOID_CLAMP, Tensor
from .errors import ConfigError, DomainError, MatchingError, ShapeError
from .model import PredictionSet

logger = logging.getLogger(__name__)

Sigma = Sequence[Optional[int]]
Matcher = Callable[[PredictionSet, GroundTruth], Sigma]


@dataclass
class LossWeights:
    lambda_focal: float = 20.0
    lambda_dice: float = 1.0
    no_object_weight: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_epsilon: float = 1.0

    def __post_init__(self):
        for name in ("lambda_focal", "lambda_dice", "no_object_weight", "focal_gamma",
                     "dice_epsilon"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {value}")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigError(f"focal_alpha must lie in [0, 1], got {self.focal_alpha}")


def _binary_target(m_gt: Any) -> np.ndarray:
    target = np.asarray(m_gt.data if isinstance(m_gt, Tensor) else m_gt, dtype=np.float64)
    if not np.all((target == 0.0) | (target == 1.0)):
        raise DomainError("ground-truth masks must be binary")
    return target


def _check_mask_shapes(m: Tensor, target: np.ndarray) -> None:
    if m.ndim < 2 or target.ndim < 2 or m.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"mask shapes {m.shape} and {target.shape} disagree on (H, W)")


def per_pixel_ce_loss(scores: Any, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(scores)[label].

    Args:
        scores: (K, H, W) logits
        labels: (H, W) class ids in 1..K

    Returns:
        Scalar tensor
    """
    scores = E.as_tensor(scores)
    labels = np.asarray(labels)
    if scores.ndim != 3 or labels.shape != scores.shape[1:]:
        raise ShapeError(f"per_pixel_ce_loss: scores {scores.shape} vs labels {labels.shape}")
    num_classes = scores.shape[0]
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise DomainError(f"labels must lie in 1..{num_classes}, "
                          f"got range [{labels.min()}, {labels.max()}]")
    one_hot = (np.arange(1, num_classes + 1)[:, None, None] == labels[None]).astype(np.float64)
    picked = E.sum(E.mul(E.log_softmax(scores, axis=0), one_hot))
    return E.scale(picked, -1.0 / labels.size)


def focal_loss(m: Any, m_gt: Any, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t.

    ``m`` is clamped to [1e-7, 1 - 1e-7] first. Inputs broadcast, the result
    keeps every axis except the trailing (H, W).
    """
    m = E.as_tensor(m)
    target = _binary_target(m_gt)
    _check_mask_shapes(m, target)
    m = E.clamp(m, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    p_t = E.add(E.mul(m, 2.0 * target - 1.0), 1.0 - target)
    alpha_t = target * alpha + (1.0 - target) * (1.0 - alpha)
    modulator = E.pow_scalar(E.sub(1.0, p_t), gamma)
    per_pixel = E.mul(E.mul(modulator, E.log(p_t)), -alpha_t)
    return E.mean(per_pixel, axis=(-2, -1))


def dice_loss(m: Any, m_gt: Any, epsilon: float = 1.0) -> Tensor:
    """1 - (2 sum(m m_gt) + eps) / (sum(m) + sum(m_gt) + eps), per trailing (H, W)."""
    m = E.as_tensor(m)
    target = _binary_target(m_gt)
    _check_mask_shapes(m, target)
    numerator = E.add(E.scale(E.sum(E.mul(m, target), axis=(-2, -1)), 2.0), epsilon)
    denominator = E.add(E.sum(m, axis=(-2, -1)), target.sum(axis=(-2, -1)) + epsilon)
    return E.sub(1.0, E.div(numerator, denominator))


def dice_lower_bound(m_gt: Any, epsilon: float = 1.0) -> np.ndarray:
    """Smallest value dice_loss can take against ``m_gt``: -eps / (2 sum(m_gt) + eps)."""
    target = _binary_target(m_gt)
    return -epsilon / (2.0 * target.sum(axis=(-2, -1)) + epsilon)


def mask_loss(m: Any, m_gt: Any, weights: LossWeights) -> Tensor:
    """lambda_focal * focal + lambda_dice * dice."""
    focal = focal_loss(m, m_gt, weights.focal_gamma, weights.focal_alpha)
    dice = dice_loss(m, m_gt, weights.dice_epsilon)
    return E.add(E.scale(focal, weights.lambda_focal), E.scale(dice, weights.lambda_dice))


def class_column(class_id: Optional[int], num_classes: int) -> int:
    """Column of class ``class_id`` in a (K+1)-wide distribution; None is no-object."""
    if class_id is None:
        return num_classes
    if not 1 <= class_id <= num_classes:
        raise DomainError(f"class id {class_id} outside 1..{num_classes}")
    return int(class_id) - 1


def classification_loss(p: Any, c_gt: Optional[int], weights: LossWeights) -> Tensor:
    """-log p(c_gt), scaled by no_object_weight when c_gt is no-object (None)."""
    p = E.as_tensor(p)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ShapeError(f"classification_loss needs a (K+1,) distribution, got {p.shape}")
    column = class_column(c_gt, p.shape[0] - 1)
    weight = weights.no_object_weight if c_gt is None else 1.0
    return E.scale(E.sum(E.log(E.take(p, [column]))), -weight)


def check_assignment(sigma: Sigma, num_predictions: int, num_gt: int) -> List[Optional[int]]:
    """Validate sigma: one entry per prediction, every gt index used exactly once."""
    sigma = [None if s is None else int(s) for s in sigma]
    if len(sigma) != num_predictions:
        raise MatchingError(f"assignment has {len(sigma)} entries for {num_predictions} predictions")
    real = [s for s in sigma if s is not None]
    if any(not 0 <= s < num_gt for s in real):
        raise MatchingError(f"assignment references gt indices outside 0..{num_gt - 1}")
    if len(set(real)) != len(real):
        raise MatchingError("assignment matches a gt segment more than once")
    if len(real) != num_gt:
        raise MatchingError(f"assignment covers {len(real)} of {num_gt} gt segments")
    return sigma


def _log_class_probs(z: PredictionSet) -> Tensor:
    if z.class_logits is not None:
        return E.log_softmax(z.class_logits, axis=-1)
    return E.log(z.class_probs)


def mask_cls_loss(z: PredictionSet, gt: GroundTruth, sigma: Sigma, weights: LossWeights) -> Tensor:
    """Classification term averaged over the N slots plus mask term averaged over real matches.

    Args:
        z: Predictions of one decoder layer
        gt: Ground-truth segments
        sigma: For each prediction slot the matched gt index, or None for no-object
        weights: Loss weights

    Returns:
        Scalar tensor
    """
    n, num_classes = z.num_queries, z.num_classes
    sigma = check_assignment(sigma, n, gt.num_segments)
    if gt.num_segments and z.mask_shape != gt.shape:
        raise ShapeError(f"predicted masks {z.mask_shape} vs ground truth {gt.shape}")

    selector = np.zeros((n, num_classes + 1))
    for j, s in enumerate(sigma):
        if s is None:
            selector[j, num_classes] = weights.no_object_weight
        else:
            selector[j, class_column(int(gt.classes[s]), num_classes)] = 1.0
    class_term = E.scale(E.sum(E.mul(_log_class_probs(z), selector)), -1.0 / n)

    matched = [(j, s) for j, s in enumerate(sigma) if s is not None]
    if not matched:
        return class_term
    slots = [j for j, _ in matched]
    targets = gt.masks[[s for _, s in matched]].astype(np.float64)
    per_segment = mask_loss(E.take(z.mask_probs, slots, axis=0), targets, weights)
    return E.add(class_term, E.scale(E.sum(per_segment), 1.0 / len(matched)))


def aux_mask_cls_loss(layers: Sequence[PredictionSet], gt: GroundTruth, weights: LossWeights,
                      matcher: Optional[Matcher] = None) -> Tensor:
    """Sum of mask_cls_loss over decoder layers, matching each layer on its own outputs."""
    if not layers:
        raise ValueError("aux_mask_cls_loss needs at least one layer")
    if matcher is None:
        from .matching import bipartite_matcher

        matcher = bipartite_matcher(weights)
    total = None
    for z in layers:
        loss = mask_cls_loss(z, gt, matcher(z, gt), weights)
        total = loss if total is None else E.add(total, loss)
    return total
