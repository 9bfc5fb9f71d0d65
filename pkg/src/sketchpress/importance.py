"""Saliency scores and importance-proportional sketch space allocation."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sketch import SketchConfig, compress_unit, decompress_unit

DEFAULT_FLOOR = 16
# ideal shares are snapped to this grid so that float noise from rescaling the
# scores cannot move a share across an integer or reorder equal remainders
_SNAP = 2.0**20


class Granularity(enum.Enum):
    UNIFORM = "uniform"
    ROW = "row"
    LAYER = "layer"

    @property
    def code(self) -> int:
        return list(Granularity).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Granularity":
        return list(Granularity)[code]


@dataclass(frozen=True)
class ImportanceProfile:
    granularity: Granularity
    scores: np.ndarray
    sample_count: int = 0

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, np.float64).ravel()
        if s.size == 0:
            raise ValueError("importance profile needs at least one score")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("importance scores must be finite and non-negative")
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class AllocationPlan:
    per_unit_columns: tuple[int, ...]
    total_budget: int
    floor: int

    @property
    def total(self) -> int:
        return sum(self.per_unit_columns)


def activation_importance(activations, granularity: Granularity = Granularity.ROW) -> ImportanceProfile:
    """Mean squared activation per input component over ``N`` samples.

    ``activations`` is ``N x d``; component ``j`` scores ``mean_k a[k, j]**2``.
    """
    a = np.asarray(activations, np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("need a non-empty N x d activation matrix")
    scores = np.einsum("kj,kj->j", a, a) / a.shape[0]
    return ImportanceProfile(granularity, scores, a.shape[0])


def layer_importance(row_profile: ImportanceProfile) -> float:
    """A layer's importance is the mean of its row importances."""
    if len(row_profile) == 0:
        raise ValueError("empty row profile")
    return float(row_profile.scores.mean())


def bucket_scores(profile: ImportanceProfile, buckets: int = 4) -> ImportanceProfile:
    """Collapse scores into ``buckets`` quantile classes, each scored by its mean.

    Coarser classes trade a little allocation precision for more regular
    sketch sizes.
    """
    s = profile.scores
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, np.int64)
    ranks[order] = np.arange(s.size)
    cls = ranks * buckets // s.size
    # tied scores must share a class, otherwise monotonicity breaks
    for v in np.unique(s):
        same = s == v
        cls[same] = cls[same].max()
    out = np.empty_like(s)
    for c in np.unique(cls):
        out[cls == c] = s[cls == c].mean()
    return ImportanceProfile(profile.granularity, out, profile.sample_count)


def allocate_columns(
    profile: ImportanceProfile | Sequence[float],
    total_budget: int,
    floor: int = DEFAULT_FLOOR,
) -> AllocationPlan:
    """Split ``total_budget`` columns over units in proportion to importance.

    Units whose proportional share falls under ``floor`` are pinned to it and
    the rest is re-split among the others. Integer columns come from the
    largest-remainder method (ties to the lower unit index), so the plan never
    exceeds the budget. An all-zero profile is allocated uniformly.
    """
    scores = profile.scores if isinstance(profile, ImportanceProfile) else np.asarray(profile, np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("need a non-empty 1-D score vector")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and non-negative")
    n = scores.size
    if floor < 1:
        raise ValueError("floor must be >= 1")
    if total_budget < floor * n:
        raise ValueError(f"budget {total_budget} cannot give {n} units a floor of {floor} columns each")
    if scores.sum() == 0:
        scores = np.ones(n)

    pinned = np.zeros(n, bool)
    while True:
        free = ~pinned
        budget = total_budget - floor * pinned.sum()
        w = np.where(free, scores, 0.0)
        total = w.sum()
        if total == 0:
            ideal = np.where(free, budget / free.sum(), float(floor))
        else:
            ideal = np.where(free, w / total * budget, float(floor))
        low = free & (ideal < floor)
        if not low.any():
            break
        pinned |= low

    ideal = np.round(ideal * _SNAP) / _SNAP
    base = np.floor(ideal).astype(np.int64)
    base[pinned] = floor
    left = total_budget - int(base.sum())
    if left > 0:
        rem = np.where(pinned, -1.0, ideal - base)
        order = np.lexsort((np.arange(n), -rem))
        base[order[:left]] += 1
    return AllocationPlan(tuple(int(c) for c in base), total_budget, floor)


def perturbation_importance(
    evaluate: Callable[[list[np.ndarray]], float],
    weights: Sequence[np.ndarray],
    layer_index: int,
    config: SketchConfig,
) -> float:
    """Loss increase from sketch-compressing only ``weights[layer_index]``."""
    if not 0 <= layer_index < len(weights):
        raise IndexError(f"layer index {layer_index} out of range for {len(weights)} layers")
    base = evaluate(list(weights))
    target = np.asarray(weights[layer_index])
    state = compress_unit(target.ravel(), config)
    approx = decompress_unit(state, state.weight_count).reshape(target.shape).astype(target.dtype)
    perturbed = list(weights)
    perturbed[layer_index] = approx
    return float(evaluate(perturbed) - base)


@dataclass(frozen=True)
class Outliers:
    indices: np.ndarray  # int64, ordered by descending |w|
    values: np.ndarray  # float32

    def __len__(self) -> int:
        return self.indices.size

    def apply(self, approx: np.ndarray) -> np.ndarray:
        out = np.array(approx, np.float32, copy=True).ravel()
        out[self.indices] = self.values
        return out


def split_topk_outliers(weights, k: int) -> tuple[Outliers, np.ndarray]:
    """Pull the ``k`` largest-magnitude weights out for exact storage.

    Returns the outliers and a copy of ``weights`` with their positions
    zeroed. Equal magnitudes go to the lower index first.
    """
    w = np.asarray(weights, np.float32).ravel()
    if not 0 <= k <= w.size:
        raise ValueError(f"k must lie in [0, {w.size}], got {k}")
    order = np.lexsort((np.arange(w.size), -np.abs(w).astype(np.float64)))
    idx = order[:k].astype(np.int64)
    remainder = w.copy()
    remainder[idx] = 0.0
    return Outliers(idx, w[idx].copy()), remainder
