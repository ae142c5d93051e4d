"""
From probability-mask pairs to task outputs.

Semantic inference marginalizes over the pairs (argmax_c sum_i p_i(c) m_i);
general inference assigns each pixel to one confident pair and VOIDs
segments whose binary mask is mostly occluded.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .metrics import VOID, MetricReport, evaluate_semantic
from .model import PredictionSet

logger = logging.getLogger(__name__)

TASKS = ("semantic", "panoptic", "instance")


@dataclass
class InferenceConfig:
    conf_threshold: float = 0.8
    overlap_keep: float = 0.8
    mask_bin: float = 0.5
    task: str = "panoptic"
    thing_classes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        for name in ("conf_threshold", "overlap_keep", "mask_bin"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.thing_classes is not None:
            self.thing_classes = tuple(int(c) for c in self.thing_classes)

    def is_thing(self, class_id: int) -> bool:
        return self.thing_classes is None or class_id in self.thing_classes


@dataclass
class SemanticLabelMap:
    labels: np.ndarray
    class_scores: Optional[np.ndarray] = None


@dataclass
class PanopticSegment:
    id: int
    class_id: int
    area: int
    score: float
    queries: Tuple[int, ...]
    is_thing: bool = True

    @property
    def query(self) -> int:
        return self.queries[0]

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "class_id": self.class_id, "area": self.area,
                "score": self.score, "queries": list(self.queries), "is_thing": self.is_thing}


@dataclass
class PanopticLabelMap:
    """Segment id map (0 = VOID) and the segments it declares."""

    segment_ids: np.ndarray
    segments: List[PanopticSegment] = field(default_factory=list)

    def to_semantic(self) -> np.ndarray:
        return to_semantic(self)


def _arrays(z: PredictionSet) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(z.class_probs.data), np.asarray(z.mask_probs.data)


def semantic_inference(z: PredictionSet) -> SemanticLabelMap:
    """Per-pixel argmax over real classes of sum_i p_i(c) m_i; lowest class wins ties."""
    probs, masks = _arrays(z)
    num_classes = probs.shape[1] - 1
    scores = np.tensordot(probs[:, :num_classes], masks, axes=([0], [0]))
    labels = np.argmax(scores, axis=0).astype(np.int64) + 1
    return SemanticLabelMap(labels=labels, class_scores=scores)


def general_inference(z: PredictionSet, config: Optional[InferenceConfig] = None) -> PanopticLabelMap:
    """Pixel-to-pair assignment with confidence filtering and occlusion VOIDing.

    Pairs predicting no-object or with p_i(c_i) below conf_threshold are
    dropped first; each pixel then goes to the surviving pair maximizing
    p_i(c_i) m_i (lowest query index on ties). A pair keeps the pixels it won
    inside its binary mask m_i > mask_bin, and is VOIDed when those are less
    than overlap_keep of the binary mask.
    """
    config = config or InferenceConfig()
    probs, masks = _arrays(z)
    num_queries, width = probs.shape
    num_classes = width - 1
    segment_ids = np.zeros(masks.shape[1:], dtype=np.int64)

    best = np.argmax(probs, axis=1)
    confidence = probs[np.arange(num_queries), best]
    kept = np.flatnonzero((best != num_classes) & (confidence >= config.conf_threshold))
    if kept.size == 0:
        logger.debug("general inference: every pair filtered, map is all VOID")
        return PanopticLabelMap(segment_ids, [])

    weighted = confidence[kept, None, None] * masks[kept]
    winner = kept[np.argmax(weighted, axis=0)]

    segments: List[PanopticSegment] = []
    merged: Dict[int, PanopticSegment] = {}
    for query in kept.tolist():
        binary = masks[query] > config.mask_bin
        region = (winner == query) & binary
        binary_area = int(binary.sum())
        region_area = int(region.sum())
        if binary_area == 0 or region_area == 0 or region_area / binary_area < config.overlap_keep:
            continue
        class_id = int(best[query]) + 1
        thing = config.is_thing(class_id)
        merge = config.task == "semantic" or (config.task == "panoptic" and not thing)
        if merge and class_id in merged:
            segment = merged[class_id]
            segment.queries = segment.queries + (query,)
            segment.score = max(segment.score, float(confidence[query]))
        else:
            segment = PanopticSegment(id=len(segments) + 1, class_id=class_id, area=0,
                                      score=float(confidence[query]), queries=(query,),
                                      is_thing=thing and config.task != "semantic")
            segments.append(segment)
            if merge:
                merged[class_id] = segment
        segment_ids[region] = segment.id

    areas = np.bincount(segment_ids.reshape(-1), minlength=len(segments) + 1)
    for segment in segments:
        segment.area = int(areas[segment.id])
    return PanopticLabelMap(segment_ids, segments)


def to_semantic(panoptic: PanopticLabelMap) -> np.ndarray:
    """Class label map of a general-inference result, VOID = 0."""
    lookup = np.zeros(len(panoptic.segments) + 1, dtype=np.int64)
    for segment in panoptic.segments:
        lookup[segment.id] = segment.class_id
    return lookup[panoptic.segment_ids]


def compare_inference_strategies(predictions: Sequence[PredictionSet], gt: Sequence[np.ndarray],
                                 num_classes: int, conf_threshold: float = 0.3
                                 ) -> Dict[str, MetricReport]:
    """Score semantic and general inference on the same predictions.

    Args:
        predictions: One PredictionSet per image
        gt: Semantic ground-truth label maps
        num_classes: K
        conf_threshold: General-inference confidence filter (semantic task)

    Returns:
        {"semantic_inference": report, "general_inference": report}
    """
    config = InferenceConfig(conf_threshold=conf_threshold, task="semantic")
    semantic_maps = [semantic_inference(z).labels for z in predictions]
    general_maps = [to_semantic(general_inference(z, config)) for z in predictions]
    return {
        "semantic_inference": evaluate_semantic(semantic_maps, gt, num_classes),
        "general_inference": evaluate_semantic(general_maps, gt, num_classes),
    }
