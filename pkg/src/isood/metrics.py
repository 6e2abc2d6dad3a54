"""Detection metrics per subset and cross-level trend statistics.

Conventions pinned here because scorer outputs can tie (e.g. saturated
softmax): AUROC gives ties half credit, FPR@TPR counts ties as positive,
AUPR treats ID as the positive class with step-wise interpolation.
All functions are pure and trivially parallel across (subset, scorer) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ValidationError


def _as_scores(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError(f"{name} score set is empty")
    if np.any(~np.isfinite(arr)):
        raise ValidationError(f"{name} scores contain non-finite values")
    return arr


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """False-positive rate on OOD at the loosest threshold that still accepts
    at least ``tpr_target`` of the ID scores (scores >= threshold count as ID)."""
    id_s = _as_scores("ID", id_scores)
    ood_s = _as_scores("OOD", ood_scores)
    if not (0.0 < tpr_target <= 1.0):
        raise ValidationError(f"tpr_target must be in (0, 1], got {tpr_target}")
    need = int(np.ceil(tpr_target * id_s.size))
    threshold = np.sort(id_s)[::-1][need - 1]
    return float(np.mean(ood_s >= threshold))


def auroc(id_scores, ood_scores) -> float:
    """P(ID > OOD) + 0.5 P(ID == OOD) via average ranks, O(m log m)."""
    id_s = _as_scores("ID", id_scores)
    ood_s = _as_scores("OOD", ood_scores)
    combined = np.concatenate([id_s, ood_s])
    ranks = _average_ranks(combined)
    u = ranks[: id_s.size].sum() - id_s.size * (id_s.size + 1) / 2.0
    return float(u / (id_s.size * ood_s.size))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank range."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def aupr(id_scores, ood_scores, positive: str = "id") -> float:
    """Area under the precision-recall curve, step-wise interpolation,
    ID positive. Sensitive to the ID/OOD size ratio by construction, so
    report subset sizes alongside."""
    if positive != "id":
        raise ValidationError("only positive='id' is supported")
    id_s = _as_scores("ID", id_scores)
    ood_s = _as_scores("OOD", ood_scores)
    scores = np.concatenate([id_s, ood_s])
    is_pos = np.concatenate([np.ones(id_s.size, bool), np.zeros(ood_s.size, bool)])

    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    # Walk distinct thresholds; samples tied at a threshold enter together.
    boundaries = np.flatnonzero(np.diff(scores) != 0)
    cut_ends = np.concatenate([boundaries, [scores.size - 1]])
    tp = np.cumsum(is_pos)[cut_ends].astype(np.float64)
    n_pred = (cut_ends + 1).astype(np.float64)
    precision = tp / n_pred
    recall = tp / id_s.size

    area = 0.0
    prev_recall = 0.0
    for p, r in zip(precision, recall):
        area += (r - prev_recall) * p
        prev_recall = r
    return float(area)


@dataclass
class LevelSeries:
    """Metric values across shift levels of one axis.

    ``levels`` carries the original 1-based level indices; construct it after
    excluding N/A levels so gaps keep their true positions.
    """

    x: np.ndarray
    axis: str = "semantic"
    levels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.levels is None:
            self.levels = np.arange(1, self.x.size + 1, dtype=np.float64)
        else:
            self.levels = np.asarray(self.levels, dtype=np.float64)
        if self.x.size != self.levels.size:
            raise ValidationError("x and levels must have equal length")
        if self.x.size < 2:
            raise ValidationError("need at least 2 levels")
        if np.any(~np.isfinite(self.x)):
            raise ValidationError("series contains non-finite values (drop N/A first)")

    @property
    def n(self) -> int:
        return int(self.x.size)


class CorrelationResult(NamedTuple):
    value: float
    degenerate: bool


def level_correlation(series: LevelSeries) -> CorrelationResult:
    """Pearson correlation between the metric values and their level indices.

    A constant series has zero variance; by convention that returns 0 with the
    degenerate flag set instead of erroring, so N/A-heavy grids still report.
    """
    x, i = series.x, series.levels
    xc = x - x.mean()
    ic = i - i.mean()
    denom = np.sqrt(np.sum(xc**2) * np.sum(ic**2))
    if denom == 0.0:
        return CorrelationResult(0.0, True)
    return CorrelationResult(float(np.sum(xc * ic) / denom), False)


def level_sensitivity(series: LevelSeries) -> float:
    """Absolute least-squares slope of the metric against the level index:
    the per-level performance change."""
    x, i = series.x, series.levels
    xc = x - x.mean()
    ic = i - i.mean()
    denom = np.sum(ic**2)
    if denom == 0.0:
        raise ValidationError("level indices are constant")
    return float(abs(np.sum(xc * ic) / denom))
