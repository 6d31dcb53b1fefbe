"""Ground-truth domain model: relevances, rankings, policies, contexts, click logs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Hashable, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import DuplicateItem, MissingRelevance, NotInRanking

ItemId = Hashable
QueryId = Hashable

PROB_SUM_TOL = 1e-12
CONTEXT_DIGITS = 12


# ---------------------------------------------------------------------------
# rankings and relevance

@dataclass(frozen=True)
class Ranking:
    items: tuple

    def __init__(self, items: Iterable[ItemId]):
        items = tuple(items)
        if len(set(items)) != len(items):
            seen, dup = set(), []
            for d in items:
                if d in seen:
                    dup.append(d)
                seen.add(d)
            raise DuplicateItem(f"ranking repeats item(s) {dup!r}")
        object.__setattr__(self, "items", items)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, item):
        return item in self.items

    def __getitem__(self, i):
        return self.items[i]


def rank_of(ranking: Ranking, item: ItemId) -> int:
    try:
        return ranking.items.index(item) + 1
    except ValueError:
        raise NotInRanking(item) from None


class RelevanceTable:
    """Immutable map (query, item) -> R in [0, 1]."""

    def __init__(self, values: Mapping[tuple, float]):
        table = {}
        for (q, d), r in values.items():
            r = float(r)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"relevance of ({q!r}, {d!r}) is {r}, outside [0, 1]")
            table[(q, d)] = r
        self._table = MappingProxyType(table)

    @classmethod
    def from_nested(cls, nested: Mapping[QueryId, Mapping[ItemId, float]]) -> "RelevanceTable":
        return cls({(q, d): r for q, inner in nested.items() for d, r in inner.items()})

    def get(self, query, item) -> float:
        try:
            return self._table[(query, item)]
        except KeyError:
            raise MissingRelevance(query, item) from None

    def __contains__(self, key):
        return key in self._table

    def items_of(self, query) -> tuple:
        return tuple(d for (q, d) in self._table if q == query)

    def queries(self) -> tuple:
        return tuple(dict.fromkeys(q for q, _ in self._table))

    def vector(self, query, items: Sequence[ItemId]) -> np.ndarray:
        return np.array([self.get(query, d) for d in items], dtype=np.float64)

    def replace(self, query, item, value) -> "RelevanceTable":
        new = dict(self._table)
        new[(query, item)] = value
        return RelevanceTable(new)

    def as_dict(self) -> dict:
        return dict(self._table)

    def __eq__(self, other):
        return isinstance(other, RelevanceTable) and dict(self._table) == dict(other._table)

    def __repr__(self):
        return f"RelevanceTable({dict(self._table)!r})"


# ---------------------------------------------------------------------------
# rank weights

@dataclass(frozen=True)
class RankWeights:
    """lambda(k) for 1-based ranks.

    ``kind`` is one of ``dcg`` (1/log2(k+1)), ``reciprocal`` (1/k) or
    ``explicit`` (``values[k-1]``, zero beyond the list).
    """

    kind: str = "dcg"
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("dcg", "reciprocal", "explicit"):
            raise ValueError(f"unknown rank-weight kind {self.kind!r}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __call__(self, rank: int) -> float:
        if rank < 1:
            raise ValueError(f"ranks are 1-based, got {rank}")
        if self.kind == "dcg":
            return 1.0 / math.log2(rank + 1)
        if self.kind == "reciprocal":
            return 1.0 / rank
        return self.values[rank - 1] if rank <= len(self.values) else 0.0


DCG = RankWeights("dcg")


def ranking_quality(ranking: Ranking, weights: RankWeights, rel: RelevanceTable, query) -> float:
    total = 0.0
    for k, d in enumerate(ranking.items, start=1):
        total += weights(k) * rel.get(query, d)
    return total


# ---------------------------------------------------------------------------
# logging policy

class LoggingPolicy:
    """Per query, a list of (Ranking, probability) pairs.

    Construction does not check that probabilities sum to one so that
    malformed scenarios can still be described and reported on by
    :func:`validate_scenario`.
    """

    def __init__(self, entries: Mapping[QueryId, Sequence[tuple]]):
        table = {}
        for q, pairs in entries.items():
            table[q] = tuple(
                (r if isinstance(r, Ranking) else Ranking(r), float(p)) for r, p in pairs
            )
        self._entries = MappingProxyType(table)

    @classmethod
    def deterministic(cls, rankings: Mapping[QueryId, Iterable[ItemId]]) -> "LoggingPolicy":
        return cls({q: [(Ranking(r), 1.0)] for q, r in rankings.items()})

    @classmethod
    def uniform(cls, rankings: Mapping[QueryId, Sequence]) -> "LoggingPolicy":
        return cls({q: [(Ranking(r), 1.0 / len(rs)) for r in rs] for q, rs in rankings.items()})

    def rankings(self, query) -> tuple:
        return self._entries[query]

    def queries(self) -> tuple:
        return tuple(self._entries)

    def is_deterministic(self, query=None) -> bool:
        qs = [query] if query is not None else self.queries()
        return all(len([p for _, p in self._entries[q] if p > 0]) == 1 for q in qs)

    def items(self, query) -> tuple:
        return tuple(dict.fromkeys(d for r, _ in self._entries[query] for d in r))

    def __repr__(self):
        return f"LoggingPolicy({dict(self._entries)!r})"


def model_quality(policy: LoggingPolicy, queries: Sequence[tuple], weights: RankWeights,
                  rel: RelevanceTable) -> float:
    """Expected ranking quality over the query distribution and the policy."""
    total_p = math.fsum(p for _, p in queries)
    if abs(total_p - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"query probabilities sum to {total_p!r}, not 1")
    total = 0.0
    for q, pq in queries:
        inner = 0.0
        for ranking, py in policy.rankings(q):
            inner += py * ranking_quality(ranking, weights, rel, q)
        total += pq * inner
    return total


@dataclass(frozen=True)
class Violation:
    kind: str
    query: object
    item: object = None
    detail: str = ""

    def __str__(self):
        where = f"query {self.query!r}" + (f", item {self.item!r}" if self.item is not None else "")
        return f"{self.kind}: {where}" + (f" ({self.detail})" if self.detail else "")


def validate_scenario(rel: RelevanceTable, policy: LoggingPolicy) -> list:
    """Every problem found; an empty list means the scenario is usable."""
    report = []
    for q in policy.queries():
        pairs = policy.rankings(q)
        total = math.fsum(p for _, p in pairs)
        if abs(total - 1.0) > PROB_SUM_TOL:
            report.append(Violation("probability_sum", q, detail=f"sums to {total!r}"))
        for ranking, p in pairs:
            if not 0.0 <= p <= 1.0:
                report.append(Violation("probability_range", q, detail=f"{p!r}"))
        missing = dict.fromkeys(d for r, _ in pairs for d in r if (q, d) not in rel)
        for d in missing:
            report.append(Violation("missing_relevance", q, d))
    return report


# ---------------------------------------------------------------------------
# display contexts

def _round_key(x: float) -> float:
    # +0.0 folds -0.0 so equal contexts never split on sign
    return round(float(x), CONTEXT_DIGITS) + 0.0


@dataclass(frozen=True)
class Position:
    rank: int

    @property
    def key(self):
        return ("position", int(self.rank))


@dataclass(frozen=True)
class ExposureProbability:
    kappa: float

    @property
    def key(self):
        return ("exposure", _round_key(self.kappa))


@dataclass(frozen=True)
class ChoiceSetMass:
    mass: float

    @property
    def key(self):
        return ("choice_mass", _round_key(self.mass))


DisplayContext = Union[Position, ExposureProbability, ChoiceSetMass]


def context_key(ctx) -> tuple:
    return ctx.key if hasattr(ctx, "key") else tuple(ctx)


# ---------------------------------------------------------------------------
# impressions and click logs

@dataclass(frozen=True)
class Impression:
    query: object
    index: int
    ranking: Ranking
    clicks: Mapping

    def __post_init__(self):
        if set(self.clicks) != set(self.ranking.items):
            raise ValueError("click keys must equal the ranking's items")
        object.__setattr__(self, "clicks", MappingProxyType({d: int(self.clicks[d]) for d in self.ranking}))

    def __eq__(self, other):
        return (isinstance(other, Impression) and self.query == other.query
                and self.index == other.index and self.ranking == other.ranking
                and dict(self.clicks) == dict(other.clicks))

    def __hash__(self):
        return hash((self.query, self.index, self.ranking))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class ClickLog:
    """All impressions logged for one query, stored column-wise.

    ``slots[i, k]`` indexes ``items`` (``-1`` pads rankings shorter than the
    longest one); ``clicks[i, k]`` is the click flag at rank ``k + 1``.
    Impression ``i`` always carries index ``i``.
    """

    def __init__(self, query, items: Sequence, slots: np.ndarray, clicks: np.ndarray):
        slots = np.asarray(slots, dtype=np.int64)
        clicks = np.asarray(clicks, dtype=np.int8)
        if slots.ndim != 2 or slots.shape != clicks.shape:
            raise ValueError("slots and clicks must be equal-shape 2-d arrays")
        if np.any(clicks[slots < 0] != 0):
            raise ValueError("padding positions cannot carry clicks")
        if np.any((clicks != 0) & (clicks != 1)):
            raise ValueError("click flags must be 0 or 1")
        self.query = query
        self.items = tuple(items)
        self.slots = _frozen(slots)
        self.clicks = _frozen(clicks)

    @classmethod
    def from_impressions(cls, query, impressions: Sequence[Impression]) -> "ClickLog":
        vocab: dict = {}
        width = max((len(imp.ranking) for imp in impressions), default=0)
        slots = np.full((len(impressions), width), -1, dtype=np.int64)
        clicks = np.zeros((len(impressions), width), dtype=np.int8)
        for i, imp in enumerate(impressions):
            if imp.query != query:
                raise ValueError(f"impression {i} belongs to query {imp.query!r}, not {query!r}")
            if imp.index != i:
                raise ValueError(f"impression at position {i} carries index {imp.index}")
            for k, d in enumerate(imp.ranking):
                slots[i, k] = vocab.setdefault(d, len(vocab))
                clicks[i, k] = imp.clicks[d]
        return cls(query, tuple(vocab), slots, clicks)

    def __len__(self):
        return self.slots.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def ranking(self, i: int) -> Ranking:
        row = self.slots[i]
        return Ranking(self.items[s] for s in row[row >= 0])

    def impression(self, i: int) -> Impression:
        row, crow = self.slots[i], self.clicks[i]
        keep = row >= 0
        ranking = Ranking(self.items[s] for s in row[keep])
        return Impression(self.query, i, ranking, dict(zip(ranking.items, crow[keep].tolist())))

    @property
    def impressions(self) -> Iterator[Impression]:
        return (self.impression(i) for i in range(len(self)))

    def head(self, n: int) -> "ClickLog":
        return ClickLog(self.query, self.items, self.slots[:n], self.clicks[:n])

    def take(self, order) -> "ClickLog":
        """Reordered copy (impression indices are renumbered 0..N-1)."""
        order = np.asarray(order)
        return ClickLog(self.query, self.items, self.slots[order], self.clicks[order])

    def display_counts(self) -> np.ndarray:
        valid = self.slots >= 0
        return np.bincount(self.slots[valid], minlength=len(self.items))

    def click_counts(self) -> np.ndarray:
        valid = self.slots >= 0
        return np.bincount(self.slots[valid], weights=self.clicks[valid], minlength=len(self.items))

    def _canonical(self):
        ids = np.array(list(self.items) + [None], dtype=object)
        return ids[self.slots], self.clicks

    def __eq__(self, other):
        if not isinstance(other, ClickLog):
            return NotImplemented
        if self.query != other.query or self.slots.shape != other.slots.shape:
            return False
        a_ids, a_c = self._canonical()
        b_ids, b_c = other._canonical()
        return bool(np.array_equal(a_ids, b_ids) and np.array_equal(a_c, b_c))

    def __repr__(self):
        return f"ClickLog(query={self.query!r}, n={len(self)}, items={self.items!r})"


# Persistence: one JSON array per line,
#   [query, index, [[item, rank, click], ...]]
# JSON keeps the int/str distinction of identifiers, so round-trips are exact.

def serialize_log(log: ClickLog) -> str:
    ids = log.items
    lines = []
    dumps = json.JSONEncoder(separators=(",", ":")).encode
    for i in range(len(log)):
        row, crow = log.slots[i], log.clicks[i]
        triples = [[ids[s], k + 1, int(c)] for k, (s, c) in enumerate(zip(row.tolist(), crow.tolist())) if s >= 0]
        lines.append(dumps([log.query, i, triples]))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_log(text: str) -> ClickLog:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records:
        raise ValueError("empty click log")
    query = records[0][0]
    impressions = []
    for lineno, (q, i, triples) in enumerate(records, start=1):
        ranks = [t[1] for t in triples]
        if ranks != list(range(1, len(triples) + 1)):
            raise ValueError(f"line {lineno}: ranks must be 1..n in order, got {ranks}")
        ranking = Ranking(t[0] for t in triples)
        impressions.append(Impression(q, i, ranking, {t[0]: t[2] for t in triples}))
    return ClickLog.from_impressions(query, impressions)


def write_log(log: ClickLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_log(log))


def read_log(path) -> ClickLog:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh.read())


def parse_logs(text: str) -> dict:
    """Split a file holding several queries' impressions into one log per query."""
    by_query: dict = {}
    for line in text.splitlines():
        if line.strip():
            by_query.setdefault(json.dumps(json.loads(line)[0]), []).append(line)
    return {json.loads(k): parse_log("\n".join(v)) for k, v in by_query.items()}


def read_logs(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_logs(fh.read())
