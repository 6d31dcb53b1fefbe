"""Generative click models: affine (position + trust bias), cascade, Plackett-Luce.

Each model works on the relevance vector of a displayed ranking in rank
order.  Sampling consumes externally supplied uniforms so that the
counter-based streams in :mod:`clicklab.rng` fully determine every click.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import rng as _rng
from .core import (
    ChoiceSetMass,
    ClickLog,
    ExposureProbability,
    Impression,
    LoggingPolicy,
    Position,
    Ranking,
    RelevanceTable,
    rank_of,
)
from .errors import DegenerateChoiceSet, InsufficientPoints

AFFINITY_TOL = 1e-9


@dataclass(frozen=True)
class AffineBehavior:
    """P(click | d at rank k) = alpha[k-1] * R_d + beta[k-1]."""

    alpha: tuple
    beta: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha)
        b = tuple(float(x) for x in self.beta) if len(self.beta) else (0.0,) * len(a)
        if len(a) != len(b):
            raise ValueError("alpha and beta must have one entry per rank")
        for k, (ak, bk) in enumerate(zip(a, b), start=1):
            if not (0.0 <= ak <= 1.0 and 0.0 <= bk <= 1.0 and ak + bk <= 1.0 + 1e-12):
                raise ValueError(f"rank {k}: need alpha, beta in [0,1] with alpha+beta <= 1, got ({ak}, {bk})")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    name = "affine"

    @classmethod
    def constant(cls, alpha: float, beta: float, ranks: int = 1) -> "AffineBehavior":
        return cls((alpha,) * ranks, (beta,) * ranks)

    def _params(self, n: int):
        if n > len(self.alpha):
            raise ValueError(f"affine behavior covers {len(self.alpha)} ranks, ranking has {n}")
        return np.array(self.alpha[:n]), np.array(self.beta[:n])

    def click_probs(self, r: np.ndarray) -> np.ndarray:
        a, b = self._params(len(r))
        return a * r + b

    def sample_clicks(self, r: np.ndarray, u: np.ndarray) -> np.ndarray:
        return u < self.click_probs(r)

    def context(self, r: np.ndarray, k: int):
        return Position(k)


@dataclass(frozen=True)
class CascadeBehavior:
    """Top-down scan; the first item whose relevance draw succeeds is clicked."""

    name = "cascade"

    @staticmethod
    def continuation(r: np.ndarray) -> np.ndarray:
        # kappa_k = prod_{j<k} (1 - R_j)
        return np.concatenate(([1.0], np.cumprod(1.0 - r[:-1]))) if len(r) else np.array([])

    def click_probs(self, r: np.ndarray) -> np.ndarray:
        return self.continuation(r) * r

    def sample_clicks(self, r: np.ndarray, u: np.ndarray) -> np.ndarray:
        hit = u < r
        first = np.argmax(hit, axis=-1)
        any_hit = hit.any(axis=-1)
        out = np.zeros_like(hit)
        rows = np.nonzero(any_hit)[0]
        out[rows, first[rows]] = True
        return out

    def context(self, r: np.ndarray, k: int):
        return ExposureProbability(float(self.continuation(r)[k - 1]))


@dataclass(frozen=True)
class PlackettLuceBehavior:
    """Exactly one click per impression, chosen with probability R_d / sum(R)."""

    name = "plackett_luce"

    @staticmethod
    def _total(r):
        total = float(np.sum(r))
        if total <= 0.0:
            raise DegenerateChoiceSet("Plackett-Luce choice over items with zero total relevance")
        return total

    def click_probs(self, r: np.ndarray) -> np.ndarray:
        return r / self._total(r)

    def sample_clicks(self, r: np.ndarray, u: np.ndarray) -> np.ndarray:
        total = self._total(r)
        cdf = np.cumsum(r) / total
        last = int(np.nonzero(r > 0)[0][-1])
        cdf[last:] = 1.0
        pick = np.minimum(np.searchsorted(cdf, u[..., 0], side="right"), last)
        out = np.zeros(u.shape, dtype=bool)
        out[np.arange(u.shape[0]), pick] = True
        return out

    def context(self, r: np.ndarray, k: int):
        return ChoiceSetMass(float(np.sum(r) - r[k - 1]))


BehaviorModel = Union[AffineBehavior, CascadeBehavior, PlackettLuceBehavior]


# ---------------------------------------------------------------------------

def click_probs(behavior: BehaviorModel, rel: RelevanceTable, query, ranking: Ranking) -> np.ndarray:
    """Marginal click probability of every item, in rank order."""
    return behavior.click_probs(rel.vector(query, ranking.items))


def click_prob(behavior: BehaviorModel, rel: RelevanceTable, query, ranking: Ranking, item) -> float:
    k = rank_of(ranking, item)
    return float(click_probs(behavior, rel, query, ranking)[k - 1])


def exposure_context(behavior: BehaviorModel, rel: RelevanceTable, query, ranking: Ranking, item):
    k = rank_of(ranking, item)
    return behavior.context(rel.vector(query, ranking.items), k)


def exposure_contexts(behavior: BehaviorModel, rel: RelevanceTable, query, ranking: Ranking) -> dict:
    r = rel.vector(query, ranking.items)
    return {d: behavior.context(r, k) for k, d in enumerate(ranking.items, start=1)}


def sample_impression(behavior: BehaviorModel, rel: RelevanceTable, query, ranking: Ranking,
                      stream: _rng.ImpressionStream) -> Impression:
    r = rel.vector(query, ranking.items)
    u = stream.uniforms(_rng.CLICK_SLOT0, len(ranking))[None, :]
    clicks = behavior.sample_clicks(r, u)[0]
    return Impression(query, stream.index, ranking, dict(zip(ranking.items, clicks.astype(int).tolist())))


def _sample_block(behavior, rel, query, policy, key, lo, hi, vocab, width):
    pairs = policy.rankings(query)
    idx = np.arange(lo, hi, dtype=np.uint64)
    probs = np.array([p for _, p in pairs])
    if len(pairs) == 1:
        choice = np.zeros(hi - lo, dtype=np.int64)
    else:
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        u0 = _rng.counter_uniforms(key, idx, _rng.POLICY_SLOT)
        choice = np.searchsorted(cdf, u0, side="right")
        choice = np.minimum(choice, len(pairs) - 1)
    slots = np.full((hi - lo, width), -1, dtype=np.int64)
    clicks = np.zeros((hi - lo, width), dtype=np.int8)
    for j, (ranking, p) in enumerate(pairs):
        rows = np.nonzero(choice == j)[0]
        if not len(rows):
            continue
        n = len(ranking)
        r = rel.vector(query, ranking.items)
        u = _rng.counter_uniforms(key, idx[rows][:, None], np.arange(_rng.CLICK_SLOT0, _rng.CLICK_SLOT0 + n)[None, :])
        slots[rows, :n] = [vocab[d] for d in ranking.items]
        clicks[rows, :n] = behavior.sample_clicks(r, u)
    return slots, clicks


def sample_log(behavior: BehaviorModel, rel: RelevanceTable, query, policy: LoggingPolicy, n: int,
               seed: int, workers: int = 1, chunk: int = 1 << 18) -> ClickLog:
    """Sample ``n`` impressions for ``query``.

    Impression ``i`` draws its ranking from policy slot 0 and its clicks from
    slots 1.. of the stream keyed by ``(seed, query, i)``, so the result does
    not depend on ``workers`` or ``chunk``.
    """
    pairs = [(r, p) for r, p in policy.rankings(query)]
    vocab = {d: i for i, d in enumerate(dict.fromkeys(d for r, _ in pairs for d in r))}
    width = max(len(r) for r, _ in pairs)
    key = _rng.stream_key(seed, query)
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)] or [(0, 0)]
    job = lambda b: _sample_block(behavior, rel, query, policy, key, b[0], b[1], vocab, width)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    slots = np.concatenate([s for s, _ in parts])
    clicks = np.concatenate([c for _, c in parts])
    return ClickLog(query, tuple(vocab), slots, clicks)


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffinityResult:
    affine: bool
    alpha: float
    beta: float
    max_residual: float


def affinity_check(points: Sequence[tuple], tolerance: float = AFFINITY_TOL) -> AffinityResult:
    """Least-squares line P ~ alpha * R + beta through (R, P) points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2 or len(np.unique(pts[:, 0])) < 2:
        raise InsufficientPoints("need at least two distinct relevance values")
    design = np.column_stack([pts[:, 0], np.ones(len(pts))])
    (alpha, beta), *_ = np.linalg.lstsq(design, pts[:, 1], rcond=None)
    resid = float(np.max(np.abs(pts[:, 1] - (alpha * pts[:, 0] + beta))))
    return AffinityResult(resid <= tolerance, float(alpha), float(beta), resid)
