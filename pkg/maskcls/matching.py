"""
Prediction-to-ground-truth assignment.

Bipartite matching minimizes -p_i(c_j) + L_mask(m_i, m_j) with the Hungarian
algorithm; fixed matching ties slot i to class i; brute force enumerates every
injection and serves as the oracle for the other two.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import engine as E
from .data import GroundTruth
from .errors import DomainError, MatchingError
from .losses import LossWeights, check_assignment, mask_loss
from .model import PredictionSet

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_GT = 8
MATCHERS = ("fixed", "bipartite")


@dataclass(frozen=True)
class Assignment:
    """sigma[i] is the gt index matched to prediction slot i, or None for no-object."""

    sigma: Tuple[Optional[int], ...]
    total_cost: Optional[float] = None

    def __len__(self) -> int:
        return len(self.sigma)

    def __iter__(self) -> Iterator[Optional[int]]:
        return iter(self.sigma)

    def __getitem__(self, index: int) -> Optional[int]:
        return self.sigma[index]

    @property
    def num_matched(self) -> int:
        return sum(s is not None for s in self.sigma)

    def pairs(self) -> List[Tuple[int, int]]:
        """(prediction slot, gt index) for every real match, by slot."""
        return [(i, s) for i, s in enumerate(self.sigma) if s is not None]

    def to_dict(self) -> Dict:
        return {"sigma": list(self.sigma), "total_cost": self.total_cost}


def _checked_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-d, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n < m:
        raise MatchingError(f"{n} predictions cannot cover {m} ground-truth segments")
    return cost


def _from_gt_rows(cost: np.ndarray, row_to_pred: np.ndarray) -> Assignment:
    sigma: List[Optional[int]] = [None] * cost.shape[0]
    for gt_index, pred in enumerate(row_to_pred):
        sigma[int(pred)] = gt_index
    total = float(sum(cost[int(p), j] for j, p in enumerate(row_to_pred)))
    return Assignment(tuple(sigma), total)


def build_cost_matrix(z: PredictionSet, gt: GroundTruth, weights: LossWeights) -> np.ndarray:
    """(N, N_gt) matrix of -p_i(c_j) + L_mask(m_i, m_j), on detached values."""
    n, m = z.num_queries, gt.num_segments
    if n < m:
        raise MatchingError(f"{n} predictions cannot cover {m} ground-truth segments")
    if m == 0:
        return np.zeros((n, 0))
    columns = gt.classes.astype(np.int64) - 1
    if columns.min() < 0 or columns.max() >= z.num_classes:
        raise DomainError(f"gt classes outside 1..{z.num_classes}")
    h, w = z.mask_shape
    with E.no_grad():
        probs = z.class_probs.data
        masks = z.mask_probs.data.reshape(n, 1, h, w)
        targets = gt.masks.reshape(1, m, h, w).astype(np.float64)
        mask_cost = mask_loss(masks, targets, weights).data
    return _checked_cost(mask_cost - probs[:, columns])


def _hungarian_rows(a: np.ndarray) -> np.ndarray:
    """Min-cost matching of every row of ``a`` (n <= m) to a distinct column.

    Shortest augmenting paths with row/column potentials, one row at a time.
    Returns the column chosen for each row.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j, 1-based, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            improve = free & (reduced < minv[1:])
            minv[1:][improve] = reduced[improve]
            way[1:][improve] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows_to_cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            rows_to_cols[p[j] - 1] = j - 1
    return rows_to_cols


def _optimal_total(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    rows = _hungarian_rows(cost.T)
    return float(cost[rows, np.arange(cost.shape[1])].sum())


def _canonical_rows(cost: np.ndarray, optimum: float) -> np.ndarray:
    """Lexicographically smallest optimal row tuple, one gt column at a time.

    Column j takes the lowest free row that still admits an optimal completion
    of the remaining columns.
    """
    n, m = cost.shape
    tol = 1e-9 * max(1.0, abs(optimum))
    free = list(range(n))
    chosen: List[int] = []
    fixed_total = 0.0
    for j in range(m):
        rest = cost[:, j + 1:]
        bound = float(rest[free].min(axis=0).sum()) if rest.shape[1] else 0.0
        for row in free:
            if fixed_total + cost[row, j] + bound > optimum + tol:
                continue
            others = [r for r in free if r != row]
            total = fixed_total + cost[row, j] + _optimal_total(rest[others])
            if total <= optimum + tol:
                chosen.append(row)
                free.remove(row)
                fixed_total += cost[row, j]
                break
        else:
            raise MatchingError(f"no optimal row left for gt column {j}")
    return np.asarray(chosen)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost assignment of every gt column to a distinct prediction row.

    Among tied optima the lowest row index wins, column by column, which is
    the order ``brute_force_matching`` enumerates in.
    """
    cost = _checked_cost(cost)
    n, m = cost.shape
    if m == 0:
        return Assignment((None,) * n, 0.0)
    return _from_gt_rows(cost, _canonical_rows(cost, _optimal_total(cost)))


def brute_force_matching(cost: np.ndarray) -> Assignment:
    """Exhaustive minimum over injections; the lexicographically first optimum wins."""
    cost = _checked_cost(cost)
    n, m = cost.shape
    if m > BRUTE_FORCE_MAX_GT:
        raise MatchingError(f"brute force refuses {m} gt segments (max {BRUTE_FORCE_MAX_GT})")
    if m == 0:
        return Assignment((None,) * n, 0.0)
    logger.debug(f"brute force over {math.perm(n, m)} injections")
    best, best_total = None, np.inf
    columns = np.arange(m)
    for rows in itertools.permutations(range(n), m):
        total = cost[list(rows), columns].sum()
        if total < best_total:
            best, best_total = rows, total
    return _from_gt_rows(cost, np.asarray(best))


def fixed_matching(gt: GroundTruth, num_classes: int,
                   num_queries: Optional[int] = None) -> Assignment:
    """Slot i takes the gt segment of class i + 1, or no-object when that class is absent."""
    num_queries = num_classes if num_queries is None else num_queries
    if num_queries != num_classes:
        raise MatchingError(f"fixed matching needs N == K, got N={num_queries}, K={num_classes}")
    classes = [int(c) for c in gt.classes]
    if len(set(classes)) != len(classes):
        raise MatchingError(f"fixed matching needs unique gt classes, got {sorted(classes)}")
    sigma: List[Optional[int]] = [None] * num_classes
    for index, class_id in enumerate(classes):
        if not 1 <= class_id <= num_classes:
            raise MatchingError(f"gt class {class_id} outside 1..{num_classes}")
        sigma[class_id - 1] = index
    return Assignment(tuple(sigma))


def bipartite_matcher(weights: LossWeights) -> Callable[[PredictionSet, GroundTruth], Assignment]:
    def _match(z: PredictionSet, gt: GroundTruth) -> Assignment:
        return hungarian(build_cost_matrix(z, gt, weights))

    return _match


def fixed_matcher() -> Callable[[PredictionSet, GroundTruth], Assignment]:
    def _match(z: PredictionSet, gt: GroundTruth) -> Assignment:
        return fixed_matching(gt, z.num_classes, z.num_queries)

    return _match


def make_matcher(kind: str, weights: LossWeights) -> Callable[[PredictionSet, GroundTruth],
                                                              Assignment]:
    """Matcher callable by name ("fixed" or "bipartite")."""
    if kind == "bipartite":
        return bipartite_matcher(weights)
    if kind == "fixed":
        return fixed_matcher()
    raise ValueError(f"Unknown matcher: {kind}")


def is_valid(assignment: Assignment, num_gt: int) -> bool:
    try:
        check_assignment(assignment.sigma, len(assignment), num_gt)
    except MatchingError:
        return False
    return True
