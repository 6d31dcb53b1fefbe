"""Maximum-likelihood click models (PBM and affine) and identifiability analysis.

Data of either kind (a sampled :class:`ClickLog` or exact click
probabilities) is reduced to per-(item, rank) display and click weights;
the normalized negative log-likelihood and its gradient only need those.
Fitting is projected gradient descent on the box [0, 1] (plus
alpha + beta <= 1 for the affine model), run on a batch of parameter
vectors at once so restarts and replications share one loop.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import rng as _rng
from .behavior import BehaviorModel, sample_log
from .core import ClickLog, LoggingPolicy, Ranking, RelevanceTable
from .errors import EmptyLog, FitDiverged, Inconsistent, ModelCoverage, NoConvergence

LOSS_GAP = 1e-9
CLUSTER_RADIUS = 1e-4
INIT_LOW, INIT_HIGH = 0.05, 0.95


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class ParametricClickModel:
    """Predicted click probability alpha_hat[k] * r_hat[d] + beta_hat[k].

    ``anchors`` maps parameter names (``alpha_1``, ``beta_2``, ``R_A`` ...)
    to values held fixed during fitting.  For ``kind == "pbm"`` every beta
    is anchored at zero.
    """

    kind: str
    items: tuple
    alpha_hat: tuple
    beta_hat: tuple
    r_hat: tuple
    anchors: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("pbm", "affine"):
            raise ValueError(f"unknown click model kind {self.kind!r}")
        items = tuple(self.items)
        a = tuple(float(x) for x in self.alpha_hat)
        b = tuple(float(x) for x in self.beta_hat) if len(self.beta_hat) else (0.0,) * len(a)
        r = tuple(float(x) for x in self.r_hat)
        if len(a) != len(b) or len(r) != len(items):
            raise ValueError("parameter vectors do not match ranks/items")
        anchors = dict(self.anchors)
        if self.kind == "pbm":
            for k in range(1, len(a) + 1):
                anchors[f"beta_{k}"] = 0.0
        names = _names(items, len(a))
        for name in anchors:
            if name not in names:
                raise ValueError(f"anchor {name!r} is not a parameter of this model")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "alpha_hat", a)
        object.__setattr__(self, "beta_hat", b)
        object.__setattr__(self, "r_hat", r)
        object.__setattr__(self, "anchors", MappingProxyType({k: float(v) for k, v in anchors.items()}))
        theta = _apply_anchors(self, np.array(a + b + r)[None, :])[0]
        object.__setattr__(self, "alpha_hat", tuple(theta[: len(a)]))
        object.__setattr__(self, "beta_hat", tuple(theta[len(a): 2 * len(a)]))
        object.__setattr__(self, "r_hat", tuple(theta[2 * len(a):]))

    @classmethod
    def pbm(cls, items: Sequence, ranks: int, anchors: Mapping | None = None, init: float = 0.5):
        anchors = {"alpha_1": 1.0} if anchors is None else anchors
        return cls("pbm", tuple(items), (init,) * ranks, (0.0,) * ranks, (init,) * len(items), anchors)

    @classmethod
    def affine(cls, items: Sequence, ranks: int, anchors: Mapping | None = None, init: float = 0.4):
        anchors = {"alpha_1": 1.0, "beta_1": 0.0} if anchors is None else anchors
        return cls("affine", tuple(items), (init,) * ranks, (init / 2,) * ranks, (init,) * len(items), anchors)

    @property
    def ranks(self) -> int:
        return len(self.alpha_hat)

    @property
    def names(self) -> tuple:
        return _names(self.items, self.ranks)

    def vector(self) -> np.ndarray:
        return np.array(self.alpha_hat + self.beta_hat + self.r_hat)

    def with_vector(self, theta) -> "ParametricClickModel":
        theta = np.asarray(theta, dtype=np.float64)
        k = self.ranks
        return replace(self, alpha_hat=tuple(theta[:k]), beta_hat=tuple(theta[k:2 * k]), r_hat=tuple(theta[2 * k:]))

    def params(self) -> dict:
        return dict(zip(self.names, self.vector().tolist()))

    def free_mask(self) -> np.ndarray:
        return np.array([n not in self.anchors for n in self.names])

    def predict(self, item, rank: int) -> float:
        d = self.items.index(item)
        return self.alpha_hat[rank - 1] * self.r_hat[d] + self.beta_hat[rank - 1]


def _names(items, ranks) -> tuple:
    return (tuple(f"alpha_{k}" for k in range(1, ranks + 1))
            + tuple(f"beta_{k}" for k in range(1, ranks + 1))
            + tuple(f"R_{d}" for d in items))


def _apply_anchors(model: ParametricClickModel, theta: np.ndarray) -> np.ndarray:
    index = {n: i for i, n in enumerate(model.names)}
    for name, v in model.anchors.items():
        theta[:, index[name]] = v
    return theta


@dataclass(frozen=True)
class FitConfig:
    step: float = 1.0
    max_iter: int = 50_000
    tol: float = 1e-10
    restarts: int = 20
    seed: int = 0
    eps: float = 1e-12

    def __post_init__(self):
        if not 0 < self.eps < 0.5:
            raise ValueError("log clamp eps must lie in (0, 0.5)")
        if self.step <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("step, tol and max_iter must be positive")


@dataclass(frozen=True)
class FitResult:
    model: ParametricClickModel
    loss: float
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# data reduction

@dataclass(frozen=True)
class ExactClickData:
    """Rankings with exact per-rank click probabilities and display weights."""

    rankings: tuple
    probs: tuple
    weights: tuple = ()

    def __post_init__(self):
        rankings = tuple(r if isinstance(r, Ranking) else Ranking(r) for r in self.rankings)
        probs = tuple(tuple(float(p) for p in ps) for ps in self.probs)
        if len(rankings) != len(probs) or any(len(r) != len(p) for r, p in zip(rankings, probs)):
            raise ValueError("one probability per displayed item is required")
        w = tuple(float(x) for x in self.weights) if len(self.weights) else (1.0 / len(rankings),) * len(rankings)
        total = math.fsum(w)
        object.__setattr__(self, "rankings", rankings)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "weights", tuple(x / total for x in w))

    @classmethod
    def from_behavior(cls, behavior: BehaviorModel, policy: LoggingPolicy, rel: RelevanceTable, query):
        pairs = [(r, p) for r, p in policy.rankings(query) if p > 0]
        probs = [behavior.click_probs(rel.vector(query, r.items)).tolist() for r, _ in pairs]
        return cls(tuple(r for r, _ in pairs), tuple(probs), tuple(p for _, p in pairs))

    def items(self) -> tuple:
        return tuple(dict.fromkeys(d for r in self.rankings for d in r))

    def max_rank(self) -> int:
        return max(len(r) for r in self.rankings)


@dataclass(frozen=True)
class ClickStats:
    """Display weight ``shown`` and click weight ``clicked`` per (item, rank) cell.

    ``shown``/``clicked`` have shape (M,) or (B, M) for a batch of datasets.
    """

    item_idx: np.ndarray
    rank_idx: np.ndarray
    shown: np.ndarray
    clicked: np.ndarray
    norm: float


def _check_coverage(model, items, ranks):
    missing = [d for d in items if d not in model.items]
    if missing:
        raise ModelCoverage(f"model has no relevance parameter for item(s) {missing!r}")
    if ranks > model.ranks:
        raise ModelCoverage(f"data reaches rank {ranks}, model covers {model.ranks}")


def _cells_from_log(log: ClickLog):
    valid = log.slots >= 0
    ranks = np.broadcast_to(np.arange(log.slots.shape[1]), log.slots.shape)
    code = log.slots[valid] * log.slots.shape[1] + ranks[valid]
    size = len(log.items) * log.slots.shape[1]
    shown = np.bincount(code, minlength=size)
    clicked = np.bincount(code, weights=log.clicks[valid], minlength=size)
    return shown, clicked


def stats_for(model: ParametricClickModel, data) -> ClickStats:
    if isinstance(data, ClickLog):
        if len(data) == 0:
            raise EmptyLog("cannot fit an empty log")
        _check_coverage(model, data.items, data.slots.shape[1] if len(data) else 0)
        used = data.display_counts() > 0
        _check_coverage(model, [d for d, u in zip(data.items, used) if u], 0)
        width = data.slots.shape[1]
        shown, clicked = _cells_from_log(data)
        keep = np.nonzero(shown)[0]
        d_local, k = np.divmod(keep, width)
        item_idx = np.array([model.items.index(data.items[i]) for i in d_local], dtype=np.int64)
        return ClickStats(item_idx, k.astype(np.int64), shown[keep].astype(np.float64), clicked[keep],
                          1.0 / (len(data) * len(model.items)))
    if isinstance(data, ExactClickData):
        _check_coverage(model, data.items(), data.max_rank())
        cells: dict = {}
        for ranking, probs, w in zip(data.rankings, data.probs, data.weights):
            for k, (d, p) in enumerate(zip(ranking.items, probs)):
                s, c = cells.get((model.items.index(d), k), (0.0, 0.0))
                cells[(model.items.index(d), k)] = (s + w, c + w * p)
        keys = list(cells)
        return ClickStats(np.array([i for i, _ in keys], dtype=np.int64), np.array([k for _, k in keys], dtype=np.int64),
                          np.array([cells[x][0] for x in keys]), np.array([cells[x][1] for x in keys]),
                          1.0 / len(model.items))
    raise TypeError(f"cannot fit to {type(data).__name__}")


def batch_stats_for(model: ParametricClickModel, logs: Sequence[ClickLog]) -> ClickStats:
    """Stack several logs of one query on a shared (item, rank) cell grid."""
    width = model.ranks
    size = len(model.items) * width
    shown = np.zeros((len(logs), size))
    clicked = np.zeros((len(logs), size))
    n = len(logs[0])
    for b, log in enumerate(logs):
        if len(log) != n:
            raise ValueError("batched logs must share one size")
        _check_coverage(model, log.items, log.slots.shape[1])
        remap = np.array([model.items.index(d) for d in log.items], dtype=np.int64)
        valid = log.slots >= 0
        ranks = np.broadcast_to(np.arange(log.slots.shape[1]), log.slots.shape)
        code = remap[log.slots[valid]] * width + ranks[valid]
        shown[b] = np.bincount(code, minlength=size)
        clicked[b] = np.bincount(code, weights=log.clicks[valid], minlength=size)
    keep = np.nonzero(shown.sum(axis=0))[0]
    d, k = np.divmod(keep, width)
    return ClickStats(d, k, shown[:, keep], clicked[:, keep], 1.0 / (n * len(model.items)))


# ---------------------------------------------------------------------------
# loss

def _log_ratio(x, y, diff=None):
    """log(x / y); log1p of the relative difference when x and y are close."""
    y_safe = np.where(y > 0, y, 1.0)
    rel = ((x - y) if diff is None else diff) / y_safe
    near = np.abs(rel) < 0.5
    return np.where(near, np.log1p(np.where(near, rel, 0.0)), np.log(x / y_safe))


class _Objective:
    """Loss and gradient for a batch of parameter vectors theta (B, P)."""

    def __init__(self, model: ParametricClickModel, stats: ClickStats, eps: float):
        self.k = model.ranks
        self.n_items = len(model.items)
        self.stats = stats
        self.eps = eps
        m = len(stats.item_idx)
        self.rank_onehot = np.zeros((m, self.k))
        self.rank_onehot[np.arange(m), stats.rank_idx] = 1.0
        self.item_onehot = np.zeros((m, self.n_items))
        self.item_onehot[np.arange(m), stats.item_idx] = 1.0

    def split(self, theta):
        k = self.k
        return theta[:, :k], theta[:, k:2 * k], theta[:, 2 * k:]

    def __call__(self, theta, grad=True):
        """Deviance (NLL minus its saturated value) and its gradient.

        The deviance sits near zero at a good fit, so line searches can still
        resolve decreases long after the raw NLL has run out of digits.
        """
        s = self.stats
        a, b, r = self.split(theta)
        a_m = a[:, s.rank_idx]
        r_m = r[:, s.item_idx]
        p = a_m * r_m + b[:, s.rank_idx]
        pc = np.clip(p, self.eps, 1.0 - self.eps)
        misses = s.shown - s.clicked
        pbar = self._pbar()
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = np.where(s.clicked > 0, -s.clicked * _log_ratio(pc, pbar), 0.0)
            miss = np.where(misses > 0, -misses * _log_ratio(1.0 - pc, 1.0 - pbar), 0.0)
        dev = s.norm * (hit + miss).sum(axis=-1)
        if not grad:
            return dev, None
        # derivative evaluated at the clamped probability; zeroing it inside the
        # clamp region would turn every saturated corner into a stationary point
        dp = -s.norm * (s.clicked / pc - misses / (1.0 - pc))
        ga = (dp * r_m) @ self.rank_onehot
        gb = dp @ self.rank_onehot
        gr = (dp * a_m) @ self.item_onehot
        return dev, np.concatenate([ga, gb, gr], axis=1)

    def change(self, theta0, theta1) -> np.ndarray:
        """Loss difference L(theta1) - L(theta0), accurate even when both losses agree to every digit."""
        s = self.stats
        lo, hi = self.eps, 1.0 - self.eps
        a0, b0, r0 = self.split(theta0)
        da, db, dr = self.split(theta1 - theta0)
        raw0 = self._probs(theta0)
        raw1 = self._probs(theta1)
        # expand the product difference so tiny steps keep their relative precision
        dp = da[:, s.rank_idx] * (r0 + dr)[:, s.item_idx] + a0[:, s.rank_idx] * dr[:, s.item_idx] + db[:, s.rank_idx]
        p0, p1 = np.clip(raw0, lo, hi), np.clip(raw1, lo, hi)
        inside = (raw0 >= lo) & (raw0 <= hi) & (raw1 >= lo) & (raw1 <= hi)
        dp = np.where(inside, dp, p1 - p0)
        misses = s.shown - s.clicked
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = np.where(s.clicked > 0, -s.clicked * _log_ratio(p0 + dp, p0, dp), 0.0)
            miss = np.where(misses > 0, -misses * _log_ratio(1.0 - p0 - dp, 1.0 - p0, -dp), 0.0)
        return s.norm * (hit + miss).sum(axis=-1)

    def _probs(self, theta):
        s = self.stats
        a, b, r = self.split(theta)
        return a[:, s.rank_idx] * r[:, s.item_idx] + b[:, s.rank_idx]

    def _pbar(self):
        s = self.stats
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s.shown > 0, s.clicked / np.where(s.shown > 0, s.shown, 1.0), 0.0)

    def saturated(self, rows=None) -> np.ndarray:
        """NLL of the saturated model (one free probability per cell)."""
        s = self.stats
        shown = s.shown if rows is None or s.shown.ndim == 1 else s.shown[rows]
        clicked = s.clicked if rows is None or s.clicked.ndim == 1 else s.clicked[rows]
        misses = shown - clicked
        with np.errstate(divide="ignore", invalid="ignore"):
            pbar = np.where(shown > 0, clicked / np.where(shown > 0, shown, 1.0), 0.0)
            h = np.where(clicked > 0, clicked * np.log(np.where(pbar > 0, pbar, 1.0)), 0.0)
            h += np.where(misses > 0, misses * np.log1p(-np.where(pbar < 1, pbar, 0.0)), 0.0)
        return np.atleast_1d(-s.norm * h.sum(axis=-1))


def _single(model, data, eps):
    return _Objective(model, stats_for(model, data), eps)


def nll_loss(model: ParametricClickModel, log: ClickLog, eps: float = 1e-12) -> float:
    """Normalized click NLL with predictions clamped to [eps, 1 - eps]."""
    if not isinstance(log, ClickLog):
        raise TypeError("nll_loss takes a ClickLog; use expected_nll for exact probabilities")
    return data_loss(model, log, eps)


def nll_gradient(model: ParametricClickModel, data, eps: float = 1e-12) -> np.ndarray:
    """Analytic gradient of the loss w.r.t. the full parameter vector (anchors included)."""
    _, g = _single(model, data, eps)(model.vector()[None, :])
    return g[0]


def data_loss(model: ParametricClickModel, data, eps: float = 1e-12) -> float:
    objective = _single(model, data, eps)
    dev, _ = objective(model.vector()[None, :], grad=False)
    return float(dev[0] + objective.saturated()[0])


def expected_nll(model: ParametricClickModel, behavior: BehaviorModel, policy: LoggingPolicy,
                 rel: RelevanceTable, query, eps: float = 1e-12) -> float:
    """Cross-entropy between true and predicted clicks, averaged over the policy."""
    return data_loss(model, ExactClickData.from_behavior(behavior, policy, rel, query), eps)


# ---------------------------------------------------------------------------
# projected gradient descent

def _project(model: ParametricClickModel, theta: np.ndarray) -> np.ndarray:
    theta = np.clip(theta, 0.0, 1.0)
    if model.kind == "affine":
        k = model.ranks
        free = model.free_mask()
        for j in range(k):
            ia, ib = j, k + j
            a, b = theta[:, ia], theta[:, ib]
            over = a + b > 1.0
            if not over.any():
                continue
            if free[ia] and free[ib]:
                # Euclidean projection onto {a, b >= 0, a + b <= 1}
                shift = (a + b - 1.0) / 2.0
                na, nb = a - shift, b - shift
                na, nb = np.where(nb < 0, 1.0, na), np.where(nb < 0, 0.0, nb)
                na, nb = np.where(na < 0, 0.0, na), np.where(na < 0, 1.0, nb)
                theta[:, ia] = np.where(over, na, a)
                theta[:, ib] = np.where(over, nb, b)
            elif free[ia]:
                theta[:, ia] = np.where(over, 1.0 - b, a)
            elif free[ib]:
                theta[:, ib] = np.where(over, 1.0 - a, b)
    return _apply_anchors(model, theta)


def _descend(model: ParametricClickModel, objective: _Objective, theta0: np.ndarray, config: FitConfig):
    """Projected gradient descent on every row of theta0.

    Each row keeps its own step, starting at ``config.step``: a step is
    accepted under the usual sufficient-decrease test for projected steps,
    halved otherwise, and allowed to grow again after an acceptance.  A row
    stops once its projected gradient (unit step) has max-norm <= ``tol``.
    """
    theta = _project(model, theta0.copy())
    free = model.free_mask()
    b = theta.shape[0]
    done = np.zeros(b, dtype=bool)
    iters = np.full(b, config.max_iter)
    step = np.full(b, float(config.step))
    if objective.stats.shown.ndim == 1:
        view = lambda rows: objective
    else:
        view = lambda rows: _batch_view(objective, rows)
    call = lambda t, rows, grad=True: view(rows)(t, grad)
    loss, grad = call(theta, np.arange(b))
    if not np.all(np.isfinite(loss)):
        raise FitDiverged(0)
    for it in range(config.max_iter + 1):
        pg = theta - _project(model, theta - grad)
        conv = (np.max(np.abs(pg[:, free]), axis=1, initial=0.0) <= config.tol) & ~done
        iters[conv] = it
        done |= conv
        act = np.nonzero(~done)[0]
        if not len(act) or it == config.max_iter:
            break
        t, th, g = step[act], theta[act], grad[act]
        pending = np.ones(len(act), dtype=bool)
        new_th = th.copy()
        for _ in range(60):
            rows = np.nonzero(pending)[0]
            cand = _project(model, th[rows] - t[rows, None] * g[rows])
            # compare the exact loss change, not two nearly equal losses
            dl = view(act[rows]).change(th[rows], cand)
            delta = cand - th[rows]
            bound = np.sum(g[rows] * delta, axis=1) + np.sum(delta * delta, axis=1) / (2 * t[rows])
            ok = np.isfinite(dl) & (dl <= bound)
            new_th[rows[ok]] = cand[ok]
            pending[rows[ok]] = False
            t[rows[~ok]] *= 0.5
            if not pending.any():
                break
        if pending.any():
            raise FitDiverged(it, "line search failed")
        step[act] = np.minimum(t * 2.0, config.step * 64)
        theta[act] = new_th
        loss[act], grad[act] = call(new_th, act)
        if not np.all(np.isfinite(loss[act])):
            raise FitDiverged(it + 1)
    return theta, loss, done, iters


def _batch_view(objective: _Objective, rows) -> _Objective:
    s = objective.stats
    view = _Objective.__new__(_Objective)
    view.__dict__.update(objective.__dict__)
    view.stats = ClickStats(s.item_idx, s.rank_idx, s.shown[rows], s.clicked[rows], s.norm)
    return view


def fit(template: ParametricClickModel, data, config: FitConfig = FitConfig()) -> FitResult:
    """Projected gradient descent from the template's current parameter values."""
    objective = _single(template, data, config.eps)
    theta, dev, done, iters = _descend(template, objective, template.vector()[None, :], config)
    loss = dev + objective.saturated()
    return FitResult(template.with_vector(theta[0]), float(loss[0]), bool(done[0]), int(iters[0]))


def random_starts(template: ParametricClickModel, count: int, seed, label="restart") -> np.ndarray:
    rows = []
    for i in range(count):
        g = np.random.default_rng(_rng.derive_seed(seed, label, i))
        rows.append(g.uniform(INIT_LOW, INIT_HIGH, size=len(template.names)))
    return _apply_anchors(template, np.array(rows).reshape(count, -1))


def multistart_fit(template: ParametricClickModel, data, config: FitConfig = FitConfig()) -> list:
    objective = _single(template, data, config.eps)
    theta, dev, done, iters = _descend(template, objective, random_starts(template, config.restarts, config.seed), config)
    loss = dev + objective.saturated()
    return [FitResult(template.with_vector(t), float(l), bool(c), int(i)) for t, l, c, i in zip(theta, loss, done, iters)]


# ---------------------------------------------------------------------------
# closed-form peeling for exact PBM probabilities

@dataclass(frozen=True)
class Relation:
    """``lhs = factor * rhs`` (ratio) or ``lhs * rhs = factor`` (product)."""

    kind: str
    lhs: str
    rhs: str
    factor: float

    def residual(self, values: Mapping) -> float:
        x, y = values[self.lhs], values[self.rhs]
        if self.kind == "ratio":
            return abs(x - self.factor * y)
        return abs(x * y - self.factor)

    def __str__(self):
        if self.kind == "ratio":
            return f"{self.lhs} = {self.factor:.3f} * {self.rhs}"
        return f"{self.lhs} * {self.rhs} = {self.factor:.3f}"


@dataclass(frozen=True)
class PeelingResult:
    determined: Mapping
    constraints: tuple

    def ratio(self, lhs, rhs):
        for c in self.constraints:
            if c.kind == "ratio" and c.lhs == lhs and c.rhs == rhs:
                return c.factor
        return None


class _PotentialUF:
    # union-find over log-values with v(a) - v(b) = w edges
    def __init__(self):
        self.parent, self.pot = {}, {}

    def add(self, x):
        if x not in self.parent:
            self.parent[x], self.pot[x] = x, 0.0

    def find(self, x):
        path = []
        while self.parent[x] != x:
            path.append(x)
            x = self.parent[x]
        root, acc = x, 0.0
        for node in reversed(path):
            acc += self.pot[node]
            self.pot[node] = acc
            self.parent[node] = root
        return root

    def offset(self, x):
        self.find(x)
        return self.pot[x]

    def union(self, a, b, w, tol, relation):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            if abs((self.pot[a] - self.pot[b]) - w) > tol:
                raise Inconsistent(relation)
            return
        self.parent[ra] = rb
        self.pot[ra] = self.pot[b] + w - self.pot[a]


def _param_name(node):
    return f"alpha_{node[1]}" if node[0] == "alpha" else f"R_{node[1]}"


def closed_form_pbm(data: ExactClickData, anchor: Mapping | None = None, tol: float = 1e-9) -> PeelingResult:
    """Solve P = alpha_k * R_d exactly where the data pins values down.

    Works on log-values: each observation ties log(alpha_k) + log(R_d) to
    log(P).  Parameters connected to the anchor are determined; the rest of
    each connected block is reported as ratios between same-kind parameters
    (larger = factor * smaller) plus the product relations it must satisfy.
    """
    anchor = {"alpha_1": 1.0} if anchor is None else dict(anchor)
    uf = _PotentialUF()
    one = ("one",)
    uf.add(one)
    edges = []
    for ranking, probs in zip(data.rankings, data.probs):
        for k, (d, p) in enumerate(zip(ranking.items, probs), start=1):
            if not p > 0:
                raise Inconsistent(f"alpha_{k} * R_{d} = {p}", "zero click probability cannot be peeled")
            a, r = ("alpha", k), ("R", d)
            uf.add(a)
            uf.add(r)
            # node value: log alpha for alpha nodes, -log R for relevance nodes
            uf.union(a, r, math.log(p), tol, f"alpha_{k} * R_{d} = {p}")
            edges.append((a, r, p))
    for name, value in anchor.items():
        kind, _, label = name.partition("_")
        node = ("alpha", int(label)) if kind == "alpha" else ("R", _match_item(data, label))
        uf.add(node)
        v = math.log(value) if kind == "alpha" else -math.log(value)
        uf.union(node, one, v, tol, f"{name} = {value}")

    def value(node, base):
        v = uf.offset(node) - base
        return math.exp(v) if node[0] == "alpha" else math.exp(-v)

    nodes = [n for n in uf.parent if n != one]
    root_one = uf.find(one)
    determined = {}
    for n in nodes:
        if uf.find(n) == root_one:
            determined[_param_name(n)] = value(n, uf.offset(one))
    constraints = []
    blocks: dict = {}
    for n in nodes:
        if uf.find(n) != root_one:
            blocks.setdefault(uf.find(n), []).append(n)
    for members in blocks.values():
        for kind in ("R", "alpha"):
            same = [n for n in members if n[0] == kind]
            if len(same) < 2:
                continue
            # relative magnitudes inside the block: alpha ~ exp(v), R ~ exp(-v)
            mag = {n: (uf.offset(n) if kind == "alpha" else -uf.offset(n)) for n in same}
            ref = min(same, key=lambda n: (mag[n], str(n[1])))
            for n in same:
                if n != ref:
                    constraints.append(Relation("ratio", _param_name(n), _param_name(ref), math.exp(mag[n] - mag[ref])))
        member_set = set(members)
        for a, r, p in edges:
            if a in member_set:
                constraints.append(Relation("product", _param_name(a), _param_name(r), p))
    return PeelingResult(MappingProxyType(determined), tuple(constraints))


def _match_item(data, label):
    for d in data.items():
        if str(d) == label:
            return d
    raise ValueError(f"anchor names unknown item {label!r}")


# ---------------------------------------------------------------------------
# identifiability

@dataclass(frozen=True)
class Cluster:
    params: Mapping
    count: int
    loss: float


@dataclass(frozen=True)
class SolutionSet:
    clusters: tuple
    spread: Mapping
    best_loss: float
    solutions: tuple = ()

    def identified(self, name: str, radius: float = CLUSTER_RADIUS) -> bool:
        return self.spread[name] <= radius

    def to_csv(self, path, radius: float = CLUSTER_RADIUS) -> None:
        best = self.clusters[0].params
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "value", "identified", "spread"])
            for name, v in best.items():
                w.writerow([name, f"{v:.12g}", int(self.identified(name, radius)), f"{self.spread[name]:.12g}"])


def cluster_solutions(vectors: np.ndarray, radius: float = CLUSTER_RADIUS) -> list:
    """Leader clustering under the max-norm; returns member index lists."""
    reps, members = [], []
    for i, v in enumerate(vectors):
        for c, rep in enumerate(reps):
            if np.max(np.abs(v - rep)) <= radius:
                members[c].append(i)
                break
        else:
            reps.append(v)
            members.append([i])
    return members


def identifiability_probe(template: ParametricClickModel, data, config: FitConfig = FitConfig(),
                          loss_gap: float = LOSS_GAP, radius: float = CLUSTER_RADIUS) -> SolutionSet:
    """Multi-start fits; cluster the near-optimal solutions and measure spread per parameter."""
    if config.restarts < 2:
        raise ValueError("identifiability probing needs at least two restarts")
    results = [r for r in multistart_fit(template, data, config) if r.converged]
    if not results:
        raise NoConvergence(f"none of {config.restarts} restarts converged")
    best = min(r.loss for r in results)
    keep = [r for r in results if r.loss <= best + loss_gap]
    vectors = np.array([r.model.vector() for r in keep])
    groups = cluster_solutions(vectors, radius)
    clusters = []
    for idx in groups:
        lead = min(idx, key=lambda i: keep[i].loss)
        clusters.append(Cluster(MappingProxyType(keep[lead].model.params()), len(idx), keep[lead].loss))
    clusters.sort(key=lambda c: c.loss)
    reps = np.array([list(c.params.values()) for c in clusters])
    spread = reps.max(axis=0) - reps.min(axis=0)
    names = template.names
    return SolutionSet(tuple(clusters), MappingProxyType(dict(zip(names, spread.tolist()))), best,
                       tuple(MappingProxyType(r.model.params()) for r in keep))


# ---------------------------------------------------------------------------
# repeated-sampling unbiasedness probe

@dataclass(frozen=True)
class ItemFitStats:
    item: object
    truth: float
    mean: float
    se: float
    z: float
    identified: bool

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 4.0 and self.identified


def z_score(mean: float, target: float, se: float) -> float:
    if se > 0:
        return (mean - target) / se
    return 0.0 if mean == target else math.copysign(math.inf, mean - target)


def unbiasedness_probe_cm(template: ParametricClickModel, behavior: BehaviorModel, policy: LoggingPolicy,
                          rel: RelevanceTable, n: int, replications: int, config: FitConfig = FitConfig(),
                          seed: int = 0, query=None) -> list:
    """Fit ``replications`` independent logs of size ``n``; compare mean fitted R to the truth.

    Each item also carries an identifiability flag from probing the exact
    (infinite-data) click probabilities of the same scenario.
    """
    if replications < 30:
        raise ValueError("need at least 30 replications")
    query = policy.queries()[0] if query is None else query
    logs = [sample_log(behavior, rel, query, policy, n, _rng.derive_seed(seed, "cm-replication", b))
            for b in range(replications)]
    stats = batch_stats_for(template, logs)
    objective = _Objective(template, stats, config.eps)
    starts = random_starts(template, replications, seed, "cm-init")
    theta, loss, done, _ = _descend(template, objective, starts, config)
    if not done.all():
        raise NoConvergence(f"{int((~done).sum())} of {replications} replication fits did not converge")
    exact = ExactClickData.from_behavior(behavior, policy, rel, query)
    probe = identifiability_probe(template, exact, replace(config, restarts=max(config.restarts, 10)))
    k = template.ranks
    out = []
    for j, d in enumerate(template.items):
        vals = theta[:, 2 * k + j]
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(replications))
        truth = rel.get(query, d)
        out.append(ItemFitStats(d, truth, mean, se, z_score(mean, truth, se), probe.identified(f"R_{d}")))
    return out
