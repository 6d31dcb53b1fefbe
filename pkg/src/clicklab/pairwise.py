"""Per-rank click/non-click ratio assumption used by pairwise debiasing.

The assumption is P(click) = t_plus * R and P(no click) = t_minus * (1 - R)
for every item shown at a rank.  Since both must sum to one, two distinct
relevances at the same rank already force t_plus = t_minus = 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .behavior import BehaviorModel, click_probs
from .core import Ranking, RelevanceTable
from .errors import BoundaryRelevance, EmptyRank

RATIO_TOL = 1e-9


@dataclass(frozen=True)
class PairwiseRatios:
    t_plus: float
    t_minus: float

    def click_prob(self, r: float) -> float:
        return self.t_plus * r

    def sums_to_one(self, r: float, tol: float = 1e-12) -> bool:
        return abs(self.t_plus * r + self.t_minus * (1.0 - r) - 1.0) <= tol


@dataclass(frozen=True)
class Underdetermined:
    """Every (t_plus, t_minus) on the line t_plus * R + t_minus * (1 - R) = 1."""

    relevance: float

    def t_plus(self, t_minus: float) -> float:
        r = self.relevance
        return (1.0 - t_minus * (1.0 - r)) / r

    def contains(self, ratios: PairwiseRatios, tol: float = 1e-12) -> bool:
        return ratios.sums_to_one(self.relevance, tol)


def _check_interior(*rs):
    for r in rs:
        if not 0.0 < r < 1.0:
            raise BoundaryRelevance(f"relevance {r} must lie strictly inside (0, 1)")


def solve_ratios(r1: float, r2: float):
    """Ratios consistent with both relevances summing click and non-click to one."""
    _check_interior(r1, r2)
    if r1 == r2:
        return Underdetermined(r1)
    # subtracting the two sum-to-one equations: t_minus (r1 - r2) = r1 - r2
    diff = r1 - r2
    t_minus = diff / diff
    # back-substitute in the form that stays exact when t_minus == 1
    t_plus = ((1.0 - t_minus) + t_minus * r1) / r1
    return PairwiseRatios(t_plus, t_minus)


@dataclass(frozen=True)
class AssumptionCheck:
    holds: bool
    ratios: object
    witness: tuple
    points: tuple = ()


def check_assumption(behavior: BehaviorModel, rel: RelevanceTable, rankings: Sequence[tuple],
                     rank: int, tol: float = RATIO_TOL) -> AssumptionCheck:
    """Test whether one (t_plus, t_minus) explains every item shown at ``rank``.

    ``rankings`` is a list of ``(query, Ranking)`` pairs; the ratios are
    per-rank constants shared across queries.  The best least-squares ratios
    are reported along with the item that fits them worst.
    """
    points = []
    for query, ranking in rankings:
        ranking = ranking if isinstance(ranking, Ranking) else Ranking(ranking)
        if len(ranking) < rank:
            continue
        d = ranking.items[rank - 1]
        points.append((d, rel.get(query, d), float(click_probs(behavior, rel, query, ranking)[rank - 1])))
    if not points:
        raise EmptyRank(f"no ranking displays an item at rank {rank}")
    _check_interior(*(r for _, r, _ in points))
    r = np.array([x[1] for x in points])
    p = np.array([x[2] for x in points])
    t_plus = float(np.dot(p, r) / np.dot(r, r))
    t_minus = float(np.dot(1.0 - p, 1.0 - r) / np.dot(1.0 - r, 1.0 - r))
    resid = np.maximum(np.abs(p - t_plus * r), np.abs((1.0 - p) - t_minus * (1.0 - r)))
    worst = int(np.argmax(resid))
    witness = (points[worst][0], float(resid[worst]))
    holds = bool(resid[worst] <= tol)
    if len(np.unique(r)) < 2:
        # one distinct relevance: any pair on the sum-to-one line works
        ratios = Underdetermined(float(r[0])) if holds else None
    else:
        ratios = PairwiseRatios(t_plus, t_minus) if holds else None
    return AssumptionCheck(holds, ratios, witness, tuple(points))
