"""Counterfactual relevance estimators built from a per-context click correction.

A correction assigns every display context ``x`` the pair
``(f(0, x), f(1, x))``; an estimate is the mean of the corrected clicks over
all logged impressions.  The affine (trust-bias) estimator, plain IPS and
clipped variants are special cases.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .behavior import BehaviorModel, exposure_contexts
from .core import ClickLog, LoggingPolicy, Position, Ranking, RankWeights, RelevanceTable, context_key
from .errors import (
    DegenerateCorrection,
    EmptyLog,
    EmptyScenario,
    MissingContext,
    MissingEstimate,
    NeverDisplayed,
    ZeroPropensity,
)

FEASIBILITY_TOL = 1e-9


def affine_to_f(alpha: float, beta: float) -> tuple:
    """(f0, f1) that inverts P = alpha * R + beta."""
    if not alpha > 0:
        raise ZeroPropensity(f"alpha must be positive, got {alpha}")
    return -beta / alpha, (1.0 - beta) / alpha


def f_to_affine(f0: float, f1: float) -> tuple:
    """(alpha, beta) of the affine click model that (f0, f1) exactly debiases."""
    gap = f1 - f0
    if gap == 0:
        raise DegenerateCorrection(f"f(1,x) == f(0,x) == {f1}")
    return 1.0 / gap, -f0 / gap


class CorrectionFunction:
    """Map from display-context key to ``(f0, f1)``."""

    def __init__(self, table: Mapping):
        self._table = MappingProxyType(
            {context_key(k) if not isinstance(k, tuple) else k: (float(v[0]), float(v[1])) for k, v in table.items()}
        )

    def __getitem__(self, ctx) -> tuple:
        key = context_key(ctx)
        try:
            return self._table[key]
        except KeyError:
            raise MissingContext(key) from None

    def __contains__(self, ctx):
        return context_key(ctx) in self._table

    def keys(self):
        return self._table.keys()

    def items(self):
        return self._table.items()

    def __len__(self):
        return len(self._table)

    def __eq__(self, other):
        return isinstance(other, CorrectionFunction) and dict(self._table) == dict(other._table)

    def __repr__(self):
        return f"CorrectionFunction({dict(self._table)!r})"

    def to_affine(self) -> dict:
        return {k: f_to_affine(*v) for k, v in self._table.items()}

    @classmethod
    def constant(cls, keys: Iterable, f0: float, f1: float) -> "CorrectionFunction":
        return cls({context_key(k): (f0, f1) for k in keys})


# ---------------------------------------------------------------------------
# clipping

@dataclass(frozen=True)
class ClipSchedule:
    """``none``, ``fixed`` (threshold ``tau``) or ``adaptive`` (tau = min(1, c / sqrt(N)))."""

    kind: str = "none"
    tau: float = 0.0
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "fixed", "adaptive"):
            raise ValueError(f"unknown clip schedule {self.kind!r}")
        if self.kind == "fixed" and not 0.0 < self.tau <= 1.0:
            raise ValueError("fixed clipping needs tau in (0, 1]")
        if self.kind == "adaptive" and not self.c > 0:
            raise ValueError("adaptive clipping needs c > 0")

    @classmethod
    def fixed(cls, tau: float) -> "ClipSchedule":
        return cls("fixed", tau=tau)

    @classmethod
    def adaptive(cls, c: float = 1.0) -> "ClipSchedule":
        return cls("adaptive", c=c)

    def threshold(self, n: int | None = None) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "fixed":
            return self.tau
        if n is None or n < 1:
            raise ValueError("adaptive clipping needs the log size N >= 1")
        return min(1.0, self.c / math.sqrt(n))


NO_CLIP = ClipSchedule()


@dataclass(frozen=True)
class AffineCorrection:
    """Per-rank (alpha_hat, beta_hat) used to invert position and trust bias."""

    alpha_hat: tuple
    beta_hat: tuple = ()
    clip: ClipSchedule = NO_CLIP

    def __post_init__(self):
        a = tuple(float(x) for x in self.alpha_hat)
        b = tuple(float(x) for x in self.beta_hat) if len(self.beta_hat) else (0.0,) * len(a)
        if len(a) != len(b):
            raise ValueError("alpha_hat and beta_hat must have one entry per rank")
        object.__setattr__(self, "alpha_hat", a)
        object.__setattr__(self, "beta_hat", b)

    def correction(self, n: int | None = None) -> CorrectionFunction:
        clipped = apply_clipping(self, n) if self.clip.kind != "none" else self
        return CorrectionFunction(
            {Position(k).key: affine_to_f(a, b) for k, (a, b) in enumerate(zip(clipped.alpha_hat, clipped.beta_hat), 1)}
        )


def apply_clipping(corr: AffineCorrection, n: int | None = None) -> AffineCorrection:
    """alpha_hat <- max(alpha_hat, tau); the result carries no further clipping."""
    tau = corr.clip.threshold(n)
    return AffineCorrection(tuple(max(a, tau) for a in corr.alpha_hat), corr.beta_hat, NO_CLIP)


@dataclass(frozen=True)
class ExposureIPS:
    """IPS on the exposure probability (cascade contexts), optionally clipped."""

    clip: ClipSchedule = NO_CLIP

    def correction_for(self, keys: Iterable, n: int | None = None) -> CorrectionFunction:
        tau = self.clip.threshold(n)
        table = {}
        for key in keys:
            kind, kappa = key
            if kind != "exposure":
                raise ValueError(f"exposure IPS cannot correct context {key!r}")
            table[key] = affine_to_f(max(kappa, tau), 0.0)
        return CorrectionFunction(table)


# ---------------------------------------------------------------------------
# estimation from logs

@dataclass(frozen=True)
class RelevanceEstimate:
    estimates: Mapping
    n_used: int
    se: Mapping = field(default_factory=dict)

    def __getitem__(self, item):
        try:
            return self.estimates[item]
        except KeyError:
            raise MissingEstimate(item) from None

    def __contains__(self, item):
        return item in self.estimates

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["item_id", "estimate", "n_used"])
            for d, v in self.estimates.items():
                w.writerow([d, repr(float(v)), self.n_used])


ContextSource = Union[Sequence[Mapping], Callable[[Ranking], Mapping]]


def _per_impression_values(log: ClickLog, f: CorrectionFunction, contexts: ContextSource) -> np.ndarray:
    """Corrected click value at every (impression, rank); 0 at padding."""
    values = np.zeros(log.slots.shape, dtype=np.float64)
    clicked = log.clicks.astype(bool)
    if callable(contexts):
        uniq, inverse = np.unique(log.slots, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for u, row in enumerate(uniq):
            n = int(np.sum(row >= 0))
            ranking = Ranking(log.items[s] for s in row[:n])
            ctx = contexts(ranking)
            f0 = np.zeros(len(row))
            f1 = np.zeros(len(row))
            for k, d in enumerate(ranking.items):
                f0[k], f1[k] = f[ctx[d]]
            rows = inverse == u
            values[rows] = np.where(clicked[rows], f1, f0)
    else:
        if len(contexts) != len(log):
            raise ValueError(f"{len(contexts)} context maps for {len(log)} impressions")
        for i, ctx in enumerate(contexts):
            for k, s in enumerate(log.slots[i]):
                if s < 0:
                    continue
                f0, f1 = f[ctx[log.items[s]]]
                values[i, k] = f1 if clicked[i, k] else f0
    return values


def _item_columns(log: ClickLog, values: np.ndarray) -> np.ndarray:
    # (items, N) layout so each item's sum runs over a contiguous row (pairwise summation)
    per_item = np.zeros((len(log.items), len(log)), dtype=np.float64)
    cols = np.arange(len(log))
    for k in range(log.slots.shape[1]):
        s = log.slots[:, k]
        ok = s >= 0
        per_item[s[ok], cols[ok]] = values[ok, k]
    return per_item


def estimate_relevance(log: ClickLog, f: CorrectionFunction, contexts: ContextSource) -> RelevanceEstimate:
    """Mean corrected click over all N_q impressions; undisplayed items get no entry.

    ``contexts`` is either one ``{item: context}`` map per impression or a
    callable producing that map from the displayed ranking.
    """
    n = len(log)
    if n == 0:
        raise EmptyLog("cannot estimate from an empty log")
    per_item = _item_columns(log, _per_impression_values(log, f, contexts))
    shown = log.display_counts() > 0
    means = per_item.sum(axis=1) / n
    sds = per_item.std(axis=1, ddof=1) if n > 1 else np.zeros(len(log.items))
    return RelevanceEstimate(
        {d: float(means[i]) for i, d in enumerate(log.items) if shown[i]},
        n,
        {d: float(sds[i] / math.sqrt(n)) for i, d in enumerate(log.items) if shown[i]},
    )


def naive_ctr(log: ClickLog) -> RelevanceEstimate:
    """Clicks divided by the number of times each item was displayed."""
    if len(log) == 0:
        raise EmptyLog("cannot estimate from an empty log")
    shown = log.display_counts()
    clicks = log.click_counts()
    est, se = {}, {}
    for i, d in enumerate(log.items):
        if shown[i]:
            p = clicks[i] / shown[i]
            est[d] = float(p)
            se[d] = math.sqrt(p * (1 - p) / shown[i])
    return RelevanceEstimate(est, len(log), se)


def estimate_ranking_quality(est: RelevanceEstimate, ranking: Ranking, weights: RankWeights) -> float:
    total = 0.0
    for k, d in enumerate(ranking.items, start=1):
        total += weights(k) * est[d]
    return total


# ---------------------------------------------------------------------------
# closed-form expectations

@dataclass(frozen=True)
class ExpectedEstimate:
    expected: float
    bias: float


def expected_estimate(behavior: BehaviorModel, policy: LoggingPolicy, f: CorrectionFunction,
                      rel: RelevanceTable, query, item) -> ExpectedEstimate:
    """E[R_hat] = sum_y P(y) [P(C=1|d,x) (f1 - f0) + f0], by enumeration of the policy."""
    total, shown = 0.0, 0.0
    for ranking, py in policy.rankings(query):
        if py <= 0 or item not in ranking:
            continue
        k = ranking.items.index(item)
        r = rel.vector(query, ranking.items)
        p = float(behavior.click_probs(r)[k])
        f0, f1 = f[behavior.context(r, k + 1)]
        total += py * (p * (f1 - f0) + f0)
        shown += py
    if shown == 0:
        raise NeverDisplayed(f"item {item!r} is never displayed for query {query!r}")
    return ExpectedEstimate(total, total - rel.get(query, item))


def expected_naive_ctr(behavior: BehaviorModel, policy: LoggingPolicy, rel: RelevanceTable,
                       query, item) -> ExpectedEstimate:
    """Large-sample CTR: expected clicks over expected displays."""
    clicks, shown = 0.0, 0.0
    for ranking, py in policy.rankings(query):
        if py <= 0 or item not in ranking:
            continue
        r = rel.vector(query, ranking.items)
        clicks += py * float(behavior.click_probs(r)[ranking.items.index(item)])
        shown += py
    if shown == 0:
        raise NeverDisplayed(f"item {item!r} is never displayed for query {query!r}")
    value = clicks / shown
    return ExpectedEstimate(value, value - rel.get(query, item))


# ---------------------------------------------------------------------------
# feasibility of unbiased correction

@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    f: CorrectionFunction
    max_residual: float
    residuals: Mapping = field(default_factory=dict)


def solve_unbiased_correction(scenario: Sequence[tuple], tolerance: float = FEASIBILITY_TOL) -> FeasibilityResult:
    """Per context, least-squares solve P_j (f1 - f0) + f0 = R_j over (f0, f1).

    Items sharing a context share one (f0, f1).  Feasible iff every equation
    holds within ``tolerance``.
    """
    groups: dict = {}
    for key, points in scenario:
        groups.setdefault(context_key(key), []).extend(points)
    if not groups:
        raise EmptyScenario("no contexts to solve for")
    table, residuals = {}, {}
    for key, points in groups.items():
        if not points:
            raise EmptyScenario(f"context {key!r} has no (R, P) pairs")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        rr, pp = pts[:, 0], pts[:, 1]
        design = np.column_stack([1.0 - pp, pp])
        sol, *_ = np.linalg.lstsq(design, rr, rcond=None)
        table[key] = (float(sol[0]), float(sol[1]))
        residuals[key] = float(np.max(np.abs(design @ sol - rr)))
    worst = max(residuals.values())
    return FeasibilityResult(worst <= tolerance, CorrectionFunction(table), worst, residuals)


def solve_expected_correction(rows: Sequence[tuple], tolerance: float = FEASIBILITY_TOL) -> FeasibilityResult:
    """Joint solve when contexts are randomized by the logging policy.

    ``rows`` holds one ``(R, [(weight, key, P), ...])`` entry per item: the
    expected corrected click sum_x w_x (P_x (f1_x - f0_x) + f0_x) must equal R.
    """
    if not rows:
        raise EmptyScenario("no items to solve for")
    keys = list(dict.fromkeys(context_key(k) for _, terms in rows for _, k, _ in terms))
    col = {k: 2 * i for i, k in enumerate(keys)}
    design = np.zeros((len(rows), 2 * len(keys)))
    target = np.zeros(len(rows))
    for j, (r, terms) in enumerate(rows):
        target[j] = r
        for w, k, p in terms:
            c = col[context_key(k)]
            design[j, c] += w * (1.0 - p)
            design[j, c + 1] += w * p
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = np.abs(design @ sol - target)
    table = {k: (float(sol[col[k]]), float(sol[col[k] + 1])) for k in keys}
    worst = float(resid.max())
    return FeasibilityResult(worst <= tolerance, CorrectionFunction(table), worst,
                             {j: float(v) for j, v in enumerate(resid)})
