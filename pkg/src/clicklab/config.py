"""Scenario files (YAML) and the runnable :class:`Scenario` they describe.

Example::

    rank_weights: dcg                # dcg | reciprocal | [w1, w2, ...]
    behavior:
      model: affine                  # affine | cascade | plackett_luce
      alpha: [0.8, 0.5]
      beta: [0.2, 0.1]
    estimator:
      correction: affine             # affine | naive_ctr | exposure_ips
      alpha_hat: [0.8, 0.5]          # defaults to the behavior's alpha/beta
      beta_hat: [0.2, 0.1]
      clip: {type: fixed, tau: 0.1}  # none | fixed (tau) | adaptive (c)
    fit:
      model: pbm                     # pbm | affine
      anchors: {alpha_1: 1.0}
    queries:
      q1:
        probability: 1.0             # optional; uniform over queries otherwise
        relevance: {A: 0.5, B: 0.2}
        rankings:
          - {items: [A, B], probability: 0.5}
          - {items: [B, A], probability: 0.5}

Every error names the offending line and field path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import yaml

from .behavior import AffineBehavior, BehaviorModel, CascadeBehavior, PlackettLuceBehavior, exposure_contexts
from .core import (
    DCG,
    LoggingPolicy,
    Position,
    RankWeights,
    RelevanceTable,
    validate_scenario,
)
from .errors import ConfigError
from .estimators import NO_CLIP, AffineCorrection, ClipSchedule, ExposureIPS


@dataclass(frozen=True)
class EstimatorSpec:
    correction: str = "affine"
    alpha_hat: tuple | None = None
    beta_hat: tuple | None = None
    clip: ClipSchedule = NO_CLIP


@dataclass(frozen=True)
class FitSpec:
    model: str = "pbm"
    anchors: Mapping = field(default_factory=lambda: {"alpha_1": 1.0})


@dataclass(frozen=True)
class Scenario:
    rel: RelevanceTable
    policy: LoggingPolicy
    behavior: BehaviorModel
    estimator: EstimatorSpec = EstimatorSpec()
    weights: RankWeights = DCG
    queries: tuple = ()
    fit: FitSpec | None = None

    def __post_init__(self):
        if not self.queries:
            qs = self.policy.queries()
            object.__setattr__(self, "queries", tuple((q, 1.0 / len(qs)) for q in qs))

    def query_ids(self) -> tuple:
        return tuple(q for q, _ in self.queries)

    def validate(self) -> None:
        problems = validate_scenario(self.rel, self.policy)
        if problems:
            raise ConfigError("; ".join(str(p) for p in problems), where="scenario")

    def items(self, query) -> tuple:
        return tuple(d for d in self.policy.items(query)
                     if any(p > 0 and d in r for r, p in self.policy.rankings(query)))

    # -- estimator plumbing -------------------------------------------------

    def affine_correction(self) -> AffineCorrection:
        spec = self.estimator
        if spec.alpha_hat is not None:
            return AffineCorrection(spec.alpha_hat, spec.beta_hat or (), spec.clip)
        if not isinstance(self.behavior, AffineBehavior):
            raise ConfigError("affine correction needs alpha_hat unless the behavior is affine", "estimator.alpha_hat")
        return AffineCorrection(self.behavior.alpha, self.behavior.beta, spec.clip)

    def correction(self, query, n: int | None = None):
        """(CorrectionFunction, context source) for ``query`` at log size ``n``."""
        kind = self.estimator.correction
        if kind == "affine":
            return self.affine_correction().correction(n), _position_contexts
        if kind == "exposure_ips":
            source = lambda ranking: exposure_contexts(self.behavior, self.rel, query, ranking)
            keys = {ctx.key for r, p in self.policy.rankings(query) if p > 0 for ctx in source(r).values()}
            return ExposureIPS(self.estimator.clip).correction_for(sorted(keys), n), source
        if kind == "naive_ctr":
            raise ValueError("naive CTR divides by displays and has no correction function")
        raise ConfigError(f"unknown correction {kind!r}", "estimator.correction")

    def with_estimator(self, **changes) -> "Scenario":
        spec = EstimatorSpec(**{**self.estimator.__dict__, **changes})
        return Scenario(self.rel, self.policy, self.behavior, spec, self.weights, self.queries, self.fit)


def _position_contexts(ranking):
    return {d: Position(k) for k, d in enumerate(ranking.items, start=1)}


# ---------------------------------------------------------------------------
# YAML loading with line tracking

def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = str(k.value)
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (str(i),), out)
    return out


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def where(self, path) -> str:
        path = tuple(str(p) for p in path)
        probe = path
        while probe not in self.lines and probe:
            probe = probe[:-1]
        line = self.lines.get(probe)
        name = ".".join(path) or "<root>"
        return f"line {line}, field {name}" if line else f"field {name}"

    def fail(self, path, message):
        raise ConfigError(message, self.where(path))

    def get(self, data, path, key, kind=None, default=..., ):
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        if key not in data:
            if default is ...:
                self.fail(path + (key,), "required field is missing")
            return default
        value = data[key]
        if kind is not None and not isinstance(value, kind):
            self.fail(path + (key,), f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
        return value

    def number(self, value, path, lo=None, hi=None) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        value = float(value)
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            self.fail(path, f"value {value} outside [{lo}, {hi}]")
        return value

    def numbers(self, value, path, lo=None, hi=None) -> tuple:
        if not isinstance(value, list) or not value:
            self.fail(path, "expected a non-empty list of numbers")
        return tuple(self.number(v, path + (i,), lo, hi) for i, v in enumerate(value))


def _behavior(rd: _Reader, spec, path) -> BehaviorModel:
    model = rd.get(spec, path, "model", str)
    if model == "affine":
        alpha = rd.numbers(rd.get(spec, path, "alpha"), path + ("alpha",), 0, 1)
        beta = rd.numbers(rd.get(spec, path, "beta", default=[0.0] * len(alpha)), path + ("beta",), 0, 1)
        if len(beta) != len(alpha):
            rd.fail(path + ("beta",), "needs one entry per rank, like alpha")
        try:
            return AffineBehavior(alpha, beta)
        except ValueError as exc:
            rd.fail(path, str(exc))
    if model == "cascade":
        return CascadeBehavior()
    if model == "plackett_luce":
        return PlackettLuceBehavior()
    rd.fail(path + ("model",), f"unknown behavior model {model!r}")


def _clip(rd: _Reader, spec, path) -> ClipSchedule:
    if spec is None or spec == "none":
        return NO_CLIP
    kind = rd.get(spec, path, "type", str)
    if kind == "none":
        return NO_CLIP
    if kind == "fixed":
        return ClipSchedule.fixed(rd.number(rd.get(spec, path, "tau"), path + ("tau",), 0, 1))
    if kind == "adaptive":
        return ClipSchedule.adaptive(rd.number(rd.get(spec, path, "c", default=1.0), path + ("c",), 0))
    rd.fail(path + ("type",), f"unknown clip type {kind!r}")


def _weights(rd: _Reader, spec, path) -> RankWeights:
    if spec is None:
        return DCG
    if isinstance(spec, list):
        return RankWeights("explicit", rd.numbers(spec, path))
    if spec in ("dcg", "reciprocal"):
        return RankWeights(spec)
    rd.fail(path, f"unknown rank weights {spec!r}")


def scenario_from_dict(data: dict, lines: dict | None = None) -> Scenario:
    rd = _Reader(lines or {})
    if not isinstance(data, dict):
        rd.fail((), "scenario file must be a mapping")
    queries = rd.get(data, (), "queries", dict)
    rel, policy, qprobs = {}, {}, []
    for q, qspec in queries.items():
        path = ("queries", q)
        relevance = rd.get(qspec, path, "relevance", dict)
        for d, r in relevance.items():
            rel[(q, d)] = rd.number(r, path + ("relevance", d), 0, 1)
        pairs = []
        rankings = rd.get(qspec, path, "rankings", list)
        for i, entry in enumerate(rankings):
            rpath = path + ("rankings", i)
            items = rd.get(entry, rpath, "items", list)
            prob = rd.number(rd.get(entry, rpath, "probability", default=1.0 if len(rankings) == 1 else ...),
                             rpath + ("probability",), 0, 1)
            if len(set(map(repr, items))) != len(items):
                rd.fail(rpath + ("items",), "ranking repeats an item")
            pairs.append((tuple(items), prob))
        policy[q] = pairs
        if "probability" in qspec:
            qprobs.append((q, rd.number(qspec["probability"], path + ("probability",), 0, 1)))
    if qprobs and len(qprobs) != len(queries):
        rd.fail(("queries",), "give a probability for every query or for none")
    behavior = _behavior(rd, rd.get(data, (), "behavior", dict), ("behavior",))
    est = data.get("estimator", {}) or {}
    epath = ("estimator",)
    correction = rd.get(est, epath, "correction", str, default="affine")
    if correction not in ("affine", "naive_ctr", "exposure_ips"):
        rd.fail(epath + ("correction",), f"unknown correction {correction!r}")
    alpha_hat = est.get("alpha_hat")
    beta_hat = est.get("beta_hat")
    estimator = EstimatorSpec(
        correction,
        rd.numbers(alpha_hat, epath + ("alpha_hat",), 0, 1) if alpha_hat is not None else None,
        rd.numbers(beta_hat, epath + ("beta_hat",), 0, 1) if beta_hat is not None else None,
        _clip(rd, est.get("clip"), epath + ("clip",)),
    )
    fit = None
    if "fit" in data:
        fspec = rd.get(data, (), "fit", dict)
        model = rd.get(fspec, ("fit",), "model", str, default="pbm")
        if model not in ("pbm", "affine"):
            rd.fail(("fit", "model"), f"unknown click model {model!r}")
        default_anchors = {"alpha_1": 1.0} if model == "pbm" else {"alpha_1": 1.0, "beta_1": 0.0}
        anchors = rd.get(fspec, ("fit",), "anchors", dict, default=default_anchors)
        fit = FitSpec(model, {str(k): rd.number(v, ("fit", "anchors", k), 0, 1) for k, v in anchors.items()})
    scenario = Scenario(
        RelevanceTable(rel), LoggingPolicy(policy), behavior, estimator,
        _weights(rd, data.get("rank_weights"), ("rank_weights",)), tuple(qprobs), fit,
    )
    problems = validate_scenario(scenario.rel, scenario.policy)
    if problems:
        p = problems[0]
        path = ("queries", p.query) + (("rankings",) if p.item is None else ("relevance", p.item))
        rd.fail(path, "; ".join(str(x) for x in problems))
    return scenario


def loads_scenario(text: str) -> Scenario:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else None
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", where) from None
    if node is None:
        raise ConfigError("empty scenario file")
    return scenario_from_dict(data, _line_map(node))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads_scenario(fh.read())
