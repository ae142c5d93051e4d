"""
Evaluation metrics.

mIoU from a dataset-level confusion matrix, panoptic quality (PQ = SQ x RQ)
with thing/stuff splits, PQ^St on semantic label maps, and per-query class
statistics. Both accumulators merge with ``+=`` so partial statistics from
separate workers can be combined in any order.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

VOID = 0
MATCH_IOU = 0.5
_OFFSET = 1 << 20

PanopticPair = Tuple[np.ndarray, Mapping[int, int]]


class ConfusionMatrix:
    """(K+1) x (K+1) pixel counts, rows = ground truth, columns = prediction, index 0 = VOID.

    VOID ground-truth pixels are ignored. VOID predictions stay in the matrix
    and count against the ground-truth class.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        size = self.num_classes + 1
        for name, labels in (("prediction", pred), ("ground truth", gt)):
            if labels.size and (labels.min() < 0 or labels.max() >= size):
                raise DomainError(f"{name} labels outside 0..{self.num_classes}")
        keep = gt != VOID
        index = size * gt[keep] + pred[keep]
        self.matrix += np.bincount(index, minlength=size * size).reshape(size, size)
        return self

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        self.matrix += other.matrix
        return self

    def iou(self) -> List[Optional[float]]:
        """Per-class IoU for classes 1..K; None where the class never occurs."""
        hits = np.diag(self.matrix)
        union = self.matrix.sum(axis=1) + self.matrix.sum(axis=0) - hits
        return [float(hits[c] / union[c]) if union[c] else None
                for c in range(1, self.num_classes + 1)]

    def miou(self) -> Optional[float]:
        observed = [v for v in self.iou() if v is not None]
        return float(np.mean(observed)) if observed else None

    def pixel_accuracy(self) -> Optional[float]:
        total = self.matrix[1:].sum()
        return float(np.trace(self.matrix[1:, 1:]) / total) if total else None


class PQStatCat:
    def __init__(self):
        self.iou = 0.0
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def __iadd__(self, other: "PQStatCat") -> "PQStatCat":
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def observed(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def summary(self) -> Dict[str, Any]:
        denominator = self.tp + 0.5 * self.fp + 0.5 * self.fn
        sq = self.iou / self.tp if self.tp else 0.0
        rq = self.tp / denominator if denominator else 0.0
        return {"pq": sq * rq, "sq": sq, "rq": rq, "tp": self.tp, "fp": self.fp, "fn": self.fn}


class PQStat:
    """Per-class TP/FP/FN counts and summed TP IoU."""

    def __init__(self):
        self.pq_per_cat: Dict[int, PQStatCat] = defaultdict(PQStatCat)

    def __getitem__(self, class_id: int) -> PQStatCat:
        return self.pq_per_cat[class_id]

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for class_id, stat in other.pq_per_cat.items():
            self.pq_per_cat[class_id] += stat
        return self

    def classes(self) -> List[int]:
        return sorted(c for c, s in self.pq_per_cat.items() if s.observed)

    def pooled(self, classes: Iterable[int]) -> Optional[Dict[str, float]]:
        """PQ/SQ/RQ with TP, FP, FN and IoU summed over ``classes`` before dividing."""
        total = PQStatCat()
        for class_id in classes:
            if class_id in self.pq_per_cat:
                total += self.pq_per_cat[class_id]
        return total.summary() if total.observed else None

    def pq_average(self, classes: Iterable[int]) -> Optional[Dict[str, float]]:
        """Mean of the per-class PQ/SQ/RQ over observed classes among ``classes``."""
        rows = [self.pq_per_cat[c].summary() for c in classes
                if c in self.pq_per_cat and self.pq_per_cat[c].observed]
        if not rows:
            return None
        return {key: float(np.mean([r[key] for r in rows])) for key in ("pq", "sq", "rq")}


@dataclass
class MetricReport:
    """Semantic and panoptic evaluation results.

    pq/sq/rq pool TP, FP, FN and IoU over all classes, so pq == sq * rq;
    pq_class_averaged is the per-class mean. Metrics that are undefined for
    the evaluated data are None.
    """

    num_classes: int
    miou: Optional[float] = None
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    pixel_accuracy: Optional[float] = None
    pq: Optional[float] = None
    sq: Optional[float] = None
    rq: Optional[float] = None
    pq_things: Optional[float] = None
    pq_stuff: Optional[float] = None
    pq_class_averaged: Optional[float] = None
    per_class_pq: Dict[int, Dict[str, Any]] = field(default_factory=dict)
    num_images: int = 0

    def merged(self, other: "MetricReport") -> "MetricReport":
        """Fields of ``self`` with the gaps filled from ``other``."""
        values = {}
        for name in self.__dataclass_fields__:
            mine = getattr(self, name)
            values[name] = getattr(other, name) if mine in (None, [], {}) else mine
        return MetricReport(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_classes": self.num_classes,
            "num_images": self.num_images,
            "miou": self.miou,
            "per_class_iou": list(self.per_class_iou),
            "pixel_accuracy": self.pixel_accuracy,
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "pq_things": self.pq_things,
            "pq_stuff": self.pq_stuff,
            "pq_class_averaged": self.pq_class_averaged,
            "per_class_pq": {str(c): dict(v) for c, v in sorted(self.per_class_pq.items())},
        }


def _as_list(maps: Union[np.ndarray, Sequence[np.ndarray]]) -> List[np.ndarray]:
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return [np.asarray(m) for m in maps]


def miou(pred: Union[np.ndarray, Sequence[np.ndarray]], gt: Union[np.ndarray, Sequence[np.ndarray]],
         num_classes: int) -> MetricReport:
    """mIoU over the dataset-level confusion matrix (not a mean of per-image scores).

    Args:
        pred: One (H, W) label map or a sequence of them (0 = VOID allowed)
        gt: Matching ground-truth label maps
        num_classes: K

    Returns:
        MetricReport with miou, per_class_iou and pixel_accuracy
    """
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    confusion = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        confusion.add(p, g)
    return MetricReport(num_classes=num_classes, miou=confusion.miou(),
                        per_class_iou=confusion.iou(),
                        pixel_accuracy=confusion.pixel_accuracy(), num_images=len(preds))


def _panoptic_view(item: Any) -> PanopticPair:
    if isinstance(item, tuple):
        ids, classes = item
    else:
        ids = getattr(item, "segment_ids", None)
        if ids is None:
            ids = item.panoptic
        classes = {}
        for segment in item.segments:
            if segment.id in classes:
                raise DomainError(f"segment id {segment.id} declared twice")
            classes[segment.id] = segment.class_id
    return np.asarray(ids, dtype=np.int64), dict(classes)


def panoptic_stats(pred: Any, gt: Any) -> PQStat:
    """Per-image PQ statistics.

    ``pred`` and ``gt`` are (segment id map, {segment id: class id}) pairs or
    objects exposing a segment id map and ``segments``. Id 0 is VOID.
    Predicted segments lying mostly on VOID ground truth are not counted as
    false positives, and VOID ground truth is removed from IoU unions.
    """
    pred_ids, pred_classes = _panoptic_view(pred)
    gt_ids, gt_classes = _panoptic_view(gt)
    if pred_ids.shape != gt_ids.shape:
        raise ShapeError(f"panoptic maps differ in shape: {pred_ids.shape} vs {gt_ids.shape}")
    for name, ids, classes in (("prediction", pred_ids, pred_classes),
                               ("ground truth", gt_ids, gt_classes)):
        undeclared = set(np.unique(ids).tolist()) - set(classes) - {VOID}
        if undeclared:
            raise DomainError(f"{name} map uses undeclared segment ids {sorted(undeclared)}")

    pred_area = dict(zip(*np.unique(pred_ids, return_counts=True)))
    gt_area = dict(zip(*np.unique(gt_ids, return_counts=True)))
    pairs, counts = np.unique(gt_ids.reshape(-1) * _OFFSET + pred_ids.reshape(-1),
                              return_counts=True)
    overlap = {(int(k // _OFFSET), int(k % _OFFSET)): int(n) for k, n in zip(pairs, counts)}

    stat = PQStat()
    matched_gt, matched_pred = set(), set()
    for (g, p), inter in overlap.items():
        if g == VOID or p == VOID or gt_classes[g] != pred_classes[p]:
            continue
        union = pred_area[p] + gt_area[g] - inter - overlap.get((VOID, p), 0)
        iou = inter / union
        if iou > MATCH_IOU:
            if g in matched_gt or p in matched_pred:
                raise AssertionError("IoU > 0.5 matched a segment twice")
            matched_gt.add(g)
            matched_pred.add(p)
            stat[gt_classes[g]].tp += 1
            stat[gt_classes[g]].iou += iou

    for g, class_id in gt_classes.items():
        if gt_area.get(g, 0) and g not in matched_gt:
            stat[class_id].fn += 1
    for p, class_id in pred_classes.items():
        area = pred_area.get(p, 0)
        if not area or p in matched_pred:
            continue
        if overlap.get((VOID, p), 0) / area > MATCH_IOU:
            continue
        stat[class_id].fp += 1
    return stat


def report_from_pq(stat: PQStat, num_classes: int, thing_classes: Iterable[int] = (),
                   num_images: int = 0) -> MetricReport:
    things = set(thing_classes)
    classes = stat.classes()
    overall = stat.pooled(classes)
    averaged = stat.pq_average(classes)
    pq_things = stat.pooled([c for c in classes if c in things])
    pq_stuff = stat.pooled([c for c in classes if c not in things])
    return MetricReport(
        num_classes=num_classes,
        pq=overall["pq"] if overall else None,
        sq=overall["sq"] if overall else None,
        rq=overall["rq"] if overall else None,
        pq_things=pq_things["pq"] if pq_things else None,
        pq_stuff=pq_stuff["pq"] if pq_stuff else None,
        pq_class_averaged=averaged["pq"] if averaged else None,
        per_class_pq={c: stat[c].summary() for c in classes},
        num_images=num_images,
    )


def panoptic_quality(pred: Any, gt: Any, num_classes: int,
                     thing_classes: Iterable[int] = ()) -> MetricReport:
    """PQ/SQ/RQ over one panoptic map pair or a sequence of pairs.

    Classes in ``thing_classes`` form the things split, all others stuff.
    """
    preds = pred if isinstance(pred, (list, tuple)) and not _is_pair(pred) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) and not _is_pair(gt) else [gt]
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    stat = PQStat()
    for p, g in zip(preds, gts):
        stat += panoptic_stats(p, g)
    return report_from_pq(stat, num_classes, thing_classes, num_images=len(preds))


def _is_pair(item: Any) -> bool:
    return isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], np.ndarray) \
        and isinstance(item[1], Mapping)


def semantic_as_panoptic(labels: np.ndarray) -> PanopticPair:
    """One segment per class, the class id doubling as segment id."""
    labels = np.asarray(labels, dtype=np.int64)
    return labels, {int(c): int(c) for c in np.unique(labels) if c != VOID}


def pq_stuff_semantic(pred: Union[np.ndarray, Sequence[np.ndarray]],
                      gt: Union[np.ndarray, Sequence[np.ndarray]], num_classes: int) -> MetricReport:
    """PQ^St: every class of every image becomes one stuff segment."""
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    stat = PQStat()
    for p, g in zip(preds, gts):
        stat += panoptic_stats(semantic_as_panoptic(p), semantic_as_panoptic(g))
    return report_from_pq(stat, num_classes, (), num_images=len(preds))


def evaluate_semantic(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                      num_classes: int) -> MetricReport:
    """mIoU, pixel accuracy and PQ^St in one report."""
    return miou(pred, gt, num_classes).merged(pq_stuff_semantic(pred, gt, num_classes))


def query_class_stats(outputs: Iterable[Any], num_queries: int) -> Dict[str, Any]:
    """Distinct classes emitted by each query slot, slots sorted by that count (descending).

    ``outputs`` are general-inference results whose segments name the
    producing query slots in ``queries``.
    """
    emitted: Dict[int, set] = {q: set() for q in range(num_queries)}
    for output in outputs:
        for segment in output.segments:
            for query in segment.queries:
                emitted[int(query)].add(int(segment.class_id))
    rows = sorted(({"query": q, "count": len(c), "classes": sorted(c)} for q, c in emitted.items()),
                  key=lambda row: (-row["count"], row["query"]))
    distinct = set().union(*emitted.values()) if emitted else set()
    return {
        "num_queries": num_queries,
        "counts": [row["count"] for row in rows],
        "per_query": rows,
        "distinct_classes": len(distinct),
    }
