"""Area scoring for geographic targeting: place rank and eigenvector centrality."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mobility import MobilityMatrix, TransitionCounts

SCORE_HEADER = ("area_id", "score", "rank", "method", "converged")


@dataclass(frozen=True, eq=False)
class FlowTable:
    """Origin-destination person counts between areas."""

    flows: np.ndarray
    area_ids: tuple[str, ...]

    def __post_init__(self):
        flows = np.array(self.flows, dtype=float)
        if flows.shape != (len(self.area_ids), len(self.area_ids)):
            raise ValueError("flow table shape does not match area list")
        if flows.min(initial=0.0) < 0:
            raise ValueError("flows must be non-negative")
        object.__setattr__(self, "flows", flows)
        object.__setattr__(self, "area_ids", tuple(self.area_ids))

    @property
    def outflow(self) -> np.ndarray:
        return self.flows.sum(axis=1)

    @property
    def inflow(self) -> np.ndarray:
        return self.flows.sum(axis=0)

    @classmethod
    def from_counts(cls, counts: TransitionCounts, include_self: bool = False,
                    day_class_filter: str = "all") -> "FlowTable":
        """Pooled transitions; staying put is not a flow unless ``include_self``."""
        flows = counts.totals(day_class_filter).astype(float)
        if not include_self:
            np.fill_diagonal(flows, 0.0)
        return cls(flows, counts.area_ids)


@dataclass(frozen=True, eq=False)
class AreaScores:
    values: np.ndarray
    area_ids: tuple[str, ...]
    method: str
    iterations: int
    converged: bool
    degenerate: bool = False

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.area_ids, self.values.tolist()))


def compute_place_rank(
    flow_table: FlowTable,
    tolerance: float = 1e-9,
    max_iters: int = 10_000,
    relaxation: float = 0.5,
    eps: float = 1e-300,
) -> AreaScores:
    """Flow-based inward accessibility.

    Ranks start at each area's total inflow. Each sweep gives every person
    leaving ``i`` the weight ``R_i / O_i`` (``O_i`` = current weighted outflow
    of ``i``), reweights the flow table row by row, and sums the weighted
    inflows into new ranks. Origins without outflow contribute nothing.

    ``relaxation`` blends each sweep with the previous ranks,
    ``R <- (1 - relaxation) * R + relaxation * sweep(R)``. The fixed points
    are those of the plain sweep (``relaxation=1``), but the blend also
    converges on periodic flow networks such as stars, where the plain sweep
    oscillates forever. Iteration stops once the largest relative change
    ``|R_t - R_t-1| / max(R_t-1, eps)`` drops below ``tolerance``.
    """
    if not 0.0 < relaxation <= 1.0:
        raise ValueError("relaxation must lie in (0, 1]")
    weighted = flow_table.flows.copy()
    if not (weighted > 0).any():
        raise ValueError("flow table has no positive flow")
    ranks = weighted.sum(axis=0)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        out = weighted.sum(axis=1)
        power = np.divide(ranks, out, out=np.zeros_like(ranks), where=out > 0)
        weighted *= power[:, None]
        swept = weighted.sum(axis=0)
        new = swept if relaxation == 1.0 else (1.0 - relaxation) * ranks + relaxation * swept
        change = np.abs(new - ranks) / np.maximum(ranks, eps)
        ranks = new
        if change.max() < tolerance:
            converged = True
            break
    return AreaScores(ranks, flow_table.area_ids, "placerank", it, converged)


def compute_eigenvector_centrality(
    matrix,
    tolerance: float = 1e-12,
    max_iters: int = 10_000,
    area_ids: Sequence[str] | None = None,
) -> AreaScores:
    """Leading eigenvector of the transposed matrix by power iteration.

    Works on a mobility matrix or on raw flows; the result has unit L1 norm,
    so high inbound probability means high importance. A matrix with no
    off-diagonal mass leaves every vector fixed: the uniform vector is
    returned and flagged ``degenerate``.
    """
    if isinstance(matrix, MobilityMatrix):
        values, area_ids = matrix.values, matrix.area_ids
    else:
        values = np.asarray(matrix, dtype=float)
        area_ids = tuple(area_ids) if area_ids is not None else tuple(str(i) for i in range(len(values)))
    n = values.shape[0]
    if not np.any(values):
        raise ValueError("zero matrix has no leading eigenvector")
    vec = np.full(n, 1.0 / n)
    if not np.any(values - np.diag(np.diag(values))):
        return AreaScores(vec, tuple(area_ids), "centrality", 0, True, degenerate=True)
    transposed = values.T
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        nxt = transposed @ vec
        total = nxt.sum()
        if total <= 0:
            raise ValueError("power iteration collapsed to the zero vector")
        nxt /= total
        delta = np.abs(nxt - vec).max()
        vec = nxt
        if delta < tolerance:
            converged = True
            break
    return AreaScores(vec, tuple(area_ids), "centrality", it, converged)


def select_top_areas(scores: AreaScores, k: int) -> list[str]:
    """The ``k`` best-scoring areas, ties broken by the lower area id."""
    n = len(scores.area_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    order = sorted(range(n), key=lambda i: (-scores.values[i], scores.area_ids[i]))
    return [scores.area_ids[i] for i in order[:k]]


def write_scores(scores: AreaScores, path) -> None:
    ranked = select_top_areas(scores, len(scores.area_ids))
    rank_of = {a: r for r, a in enumerate(ranked, start=1)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for a, v in zip(scores.area_ids, scores.values):
            w.writerow([a, repr(float(v)), rank_of[a], scores.method, str(scores.converged).lower()])
