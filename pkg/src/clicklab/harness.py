"""Verification drivers: Monte Carlo unbiasedness and consistency tests,
feasibility of unbiased corrections, click-probability curves, the
two-ranking identifiability example and the pairwise-ratio check.

Every driver returns a :class:`VerificationReport` whose serialized form
depends only on its inputs and seed (wall time is kept off the record).
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import rng as _rng
from .behavior import (
    AffineBehavior,
    CascadeBehavior,
    PlackettLuceBehavior,
    click_probs,
    exposure_contexts,
    sample_log,
)
from .clickfit import (
    CLUSTER_RADIUS,
    LOSS_GAP,
    ExactClickData,
    FitConfig,
    ParametricClickModel,
    closed_form_pbm,
    identifiability_probe,
    z_score,
)
from .config import EstimatorSpec, FitSpec, Scenario
from .core import LoggingPolicy, RelevanceTable
from .errors import Inconsistent
from .estimators import (
    ClipSchedule,
    estimate_relevance,
    expected_estimate,
    expected_naive_ctr,
    naive_ctr,
    solve_expected_correction,
    solve_unbiased_correction,
)
from .pairwise import PairwiseRatios, check_assumption, solve_ratios

Z_LIMIT = 4.0
DEFAULT_SCHEDULE = (10**2, 10**3, 10**4, 10**5, 10**6)
VERIFY_COLUMNS = ("claim", "item", "mean", "se", "z", "pass")


def _fmt(v):
    if isinstance(v, bool) or v is None:
        return "" if v is None else str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


@dataclass(frozen=True)
class VerificationReport:
    """Rows of per-item (or per-check) statistics plus an overall verdict."""

    claim: str
    rows: tuple
    passed: bool
    seed: int | None = None
    sizes: Mapping = field(default_factory=dict)
    columns: tuple = VERIFY_COLUMNS
    notes: tuple = ()
    wall_time: float = field(default=0.0, compare=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "claim": self.claim,
            "pass": self.passed,
            "seed": self.seed,
            "sizes": {k: _jsonable(v) for k, v in self.sizes.items()},
            "notes": list(self.notes),
            "rows": [{c: _jsonable(row.get(c)) for c in self.columns} for row in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def render(self, fmt: str = "csv") -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ValueError(f"unknown report format {fmt!r}")

    def write(self, path, fmt: str = "csv") -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.render(fmt))


# ---------------------------------------------------------------------------
# estimation plumbing

def estimate_log(scenario: Scenario, log):
    if scenario.estimator.correction == "naive_ctr":
        return naive_ctr(log)
    f, contexts = scenario.correction(log.query, len(log))
    return estimate_relevance(log, f, contexts)


def expected_value(scenario: Scenario, query, item, n: int | None = None) -> float:
    """Closed-form large-sample value of the scenario's estimator for one item."""
    if scenario.estimator.correction == "naive_ctr":
        return expected_naive_ctr(scenario.behavior, scenario.policy, scenario.rel, query, item).expected
    f, _ = scenario.correction(query, n)
    return expected_estimate(scenario.behavior, scenario.policy, f, scenario.rel, query, item).expected


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# unbiasedness

def run_unbiasedness_test(scenario: Scenario, n: int, replications: int, seed: int,
                          workers: int = 1, claim: str = "unbiasedness") -> VerificationReport:
    """Replicated estimates vs the true relevance, cross-checked against the closed form.

    An item passes iff |z| <= 4 against R.  The report additionally requires
    the replication mean to sit within 4 SE of the closed-form expectation;
    a miss there points at estimator plumbing, not at the theory.
    """
    if replications < 30:
        raise ValueError("need at least 30 replications")
    if n < 1000:
        raise ValueError("need N >= 1000 impressions per replication")
    scenario.validate()
    start = time.perf_counter()
    rows, ok = [], True
    for query in scenario.query_ids():
        items = scenario.items(query)

        def one(b, query=query, items=items):
            log = sample_log(scenario.behavior, scenario.rel, query, scenario.policy, n,
                             _rng.derive_seed(seed, "replication", query, b))
            est = estimate_log(scenario, log)
            return [est.estimates.get(d, math.nan) for d in items]

        values = np.array(_pool_map(one, list(range(replications)), workers))
        for j, d in enumerate(items):
            col = values[:, j]
            mean = float(np.mean(col))
            se = float(np.std(col, ddof=1) / math.sqrt(replications))
            truth = scenario.rel.get(query, d)
            expected = expected_value(scenario, query, d, n)
            z = z_score(mean, truth, se)
            z_cf = z_score(mean, expected, se)
            row_ok = abs(z) <= Z_LIMIT
            ok &= row_ok and abs(z_cf) <= Z_LIMIT
            rows.append({"claim": claim, "item": d, "mean": mean, "se": se, "z": z, "pass": row_ok,
                         "query": query, "truth": truth, "expected": expected,
                         "bias": expected - truth, "z_expected": z_cf})
    return VerificationReport(
        claim, tuple(rows), bool(ok), seed, {"n": n, "replications": replications},
        VERIFY_COLUMNS + ("query", "truth", "expected", "bias", "z_expected"),
        ("pass requires |z| <= 4 against R and |z_expected| <= 4 against the closed form",),
        time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# consistency

def run_consistency_test(scenario: Scenario, schedule: Sequence[int] = DEFAULT_SCHEDULE, seed: int = 0,
                         workers: int = 1, claim: str = "consistency") -> VerificationReport:
    """Estimates from growing prefixes of one log vs the closed-form value at each size.

    Passing is a finite-sample proxy for the limit: the final deviation must
    be within max(4 SE, 1e-3) of the expectation and no larger than the first.
    """
    schedule = [int(x) for x in schedule]
    if any(b <= a for a, b in zip(schedule, schedule[1:])) or not schedule:
        raise ValueError("schedule must be strictly increasing")
    if schedule[-1] < 10**6:
        raise ValueError("schedule must reach at least 1e6 impressions")
    scenario.validate()
    start = time.perf_counter()
    rows, ok = [], True
    for query in scenario.query_ids():
        full = sample_log(scenario.behavior, scenario.rel, query, scenario.policy, schedule[-1],
                          _rng.derive_seed(seed, "consistency", query), workers=workers)
        items = scenario.items(query)
        first = {}
        for n in schedule:
            est = estimate_log(scenario, full.head(n))
            for d in items:
                value = est.estimates.get(d, math.nan)
                se = est.se.get(d, math.nan)
                expected = expected_value(scenario, query, d, n)
                dev = abs(value - expected)
                tol = max(Z_LIMIT * se, 1e-3)
                within = dev <= tol
                first.setdefault(d, dev)
                final = n == schedule[-1]
                if final:
                    ok &= within and dev <= max(first[d], tol)
                rows.append({"claim": claim, "item": d, "mean": value, "se": se,
                             "z": z_score(value, expected, se), "pass": within, "query": query, "n": n,
                             "expected": expected, "truth": scenario.rel.get(query, d),
                             "deviation": dev, "deviation_truth": abs(value - scenario.rel.get(query, d))})
    return VerificationReport(
        claim, tuple(rows), bool(ok), seed, {"schedule": " ".join(map(str, schedule))},
        VERIFY_COLUMNS + ("query", "n", "expected", "truth", "deviation", "deviation_truth"),
        ("finite-sample proxy for the infinite-data limit: final deviation from the closed form "
         "<= max(4 SE, 1e-3) and not larger than the first",),
        time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# curves

def curve_rows(family: str, grid, s: float = 0.01, kappa: float = 0.7,
               alpha: float = 1.0, beta: float = 0.0) -> list:
    """(family, R, P) rows computed through the behavior models themselves."""
    grid = np.linspace(0.0, 1.0, int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=np.float64)
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("curve grid values must lie in [0, 1]")
    rows = []
    for r in grid.tolist():
        if family == "plackett_luce":
            # the item competes with one other item of relevance s
            p = PlackettLuceBehavior().click_probs(np.array([r, s]))[0]
        elif family == "cascade":
            # a single preceding item of relevance 1 - kappa sets the continuation
            p = CascadeBehavior().click_probs(np.array([1.0 - kappa, r]))[1]
        elif family == "affine":
            p = AffineBehavior((alpha,), (beta,)).click_probs(np.array([r]))[0]
        else:
            raise ValueError(f"unknown curve family {family!r}")
        rows.append((family, r, float(p)))
    return rows


def curve_rows_for(families, grid, **params) -> list:
    families = [families] if isinstance(families, str) else list(families)
    return [row for fam in families for row in curve_rows(fam, grid, **params)]


def emit_curves(families, grid, out=None, **params) -> list:
    """Write (family, relevance, click_prob) rows to ``out`` and return them."""
    rows = curve_rows_for(families, grid, **params)
    if out is not None:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "relevance", "click_prob"])
            for fam, r, p in rows:
                w.writerow([fam, repr(r), repr(p)])
    return rows


# ---------------------------------------------------------------------------
# feasibility of an unbiased counterfactual correction

def run_feasibility_demo(scenario: Scenario, out=None, tol: float = 1e-10,
                         expect_feasible: bool | None = None, claim: str = "feasibility") -> VerificationReport:
    """Solve for a correction f(c, x) that is unbiased for every item.

    Contexts are the behavior's own display contexts.  With a deterministic
    policy each context is solved on its own; with a stochastic policy the
    expectation over rankings is solved jointly.  The report passes when the
    verdict matches ``expect_feasible`` (or always, when that is None).
    """
    scenario.validate()
    start = time.perf_counter()
    beh, rel, policy = scenario.behavior, scenario.rel, scenario.policy
    deterministic = all(policy.is_deterministic(q) for q in scenario.query_ids())
    if deterministic:
        triples = []
        for q in scenario.query_ids():
            (ranking, _), = [(r, p) for r, p in policy.rankings(q) if p > 0]
            ctx = exposure_contexts(beh, rel, q, ranking)
            probs = click_probs(beh, rel, q, ranking)
            for d, p in zip(ranking.items, probs):
                triples.append((ctx[d].key, [(rel.get(q, d), float(p))]))
        result = solve_unbiased_correction(triples, tol)
        rows = [{"claim": claim, "context": repr(k), "residual": v,
                 "f0": result.f[k][0], "f1": result.f[k][1], "pass": v <= tol}
                for k, v in result.residuals.items()]
    else:
        entries, labels = [], []
        for q in scenario.query_ids():
            for d in scenario.items(q):
                terms = []
                for ranking, py in policy.rankings(q):
                    if py > 0 and d in ranking:
                        k = ranking.items.index(d)
                        ctx = exposure_contexts(beh, rel, q, ranking)[d]
                        terms.append((py, ctx.key, float(click_probs(beh, rel, q, ranking)[k])))
                entries.append((rel.get(q, d), terms))
                labels.append((q, d))
        result = solve_expected_correction(entries, tol)
        rows = [{"claim": claim, "context": f"{q}/{d}", "residual": result.residuals[j],
                 "f0": None, "f1": None, "pass": result.residuals[j] <= tol}
                for j, (q, d) in enumerate(labels)]
    feasible = result.max_residual <= tol
    passed = True if expect_feasible is None else feasible == expect_feasible
    report = VerificationReport(
        claim, tuple(rows), passed, None,
        {"max_residual": result.max_residual, "feasible": int(feasible), "regime": "per-context" if deterministic else "expected"},
        ("claim", "context", "residual", "f0", "f1", "pass"),
        (f"{'feasible' if feasible else 'infeasible'}: max residual {result.max_residual!r}",),
        time.perf_counter() - start,
    )
    if out is not None:
        report.write(out)
    return report


def _single_item_queries(rels: Mapping, others: Mapping, behavior) -> Scenario:
    """One query per target relevance; each shows the target then fixed companions."""
    rel, policy = {}, {}
    for q, r in rels.items():
        rel[(q, "d")] = r
        ranking = ["d"]
        for name, v in others.items():
            rel[(q, name)] = v
            ranking.append(name)
        policy[q] = [(tuple(ranking), 1.0)]
    return Scenario(RelevanceTable(rel), LoggingPolicy(policy), behavior)


def demo_scenarios() -> dict:
    """The three built-in feasibility scenarios and whether each should be feasible."""
    affine = Scenario(
        RelevanceTable.from_nested({q: {"A": 0.1, "B": 0.5, "C": 0.9} for q in ("q1", "q2", "q3")}),
        LoggingPolicy.deterministic({"q1": "ABC", "q2": "CAB", "q3": "BCA"}),
        AffineBehavior((0.8, 0.5, 0.3), (0.1, 0.1, 0.05)),
    )
    cascade_rel = {"q1": {"A": 0.1, "B": 0.5, "C": 0.9}, "q2": {"A": 0.3, "B": 0.5, "C": 0.2},
                   "q3": {"A": 0.6, "B": 0.4, "C": 0.7}}
    cascade = Scenario(
        RelevanceTable.from_nested(cascade_rel),
        LoggingPolicy.deterministic({"q1": "ABC", "q2": "CAB", "q3": "BCA"}),
        CascadeBehavior(),
    )
    pl = _single_item_queries({"r01": 0.1, "r05": 0.5, "r09": 0.9}, {"o": 0.01}, PlackettLuceBehavior())
    return {"affine": (affine, True), "cascade": (cascade, True), "plackett_luce": (pl, False)}


# ---------------------------------------------------------------------------
# two-ranking identifiability example

SCENARIO61_RANKINGS = (("A", "B", "C", "D"), ("B", "A", "D", "C"))
SCENARIO61_PROBS = ((0.90, 0.64, 0.40, 0.05), (0.80, 0.72, 0.20, 0.10))
# a PBM completion consistent with both rankings, used for the third ranking
SCENARIO61_COMPLETION = {"alpha_1": 1.0, "alpha_2": 0.8, "alpha_3": 0.8, "alpha_4": 0.2,
                         "R_A": 0.9, "R_B": 0.8, "R_C": 0.5, "R_D": 0.25}
SCENARIO61_THIRD = ("C", "D", "A", "B")


def scenario61_data(extended: bool = False, perturb: float | None = None) -> ExactClickData:
    rankings = list(SCENARIO61_RANKINGS)
    probs = [list(p) for p in SCENARIO61_PROBS]
    if perturb is not None:
        probs[0][0] = perturb
    if extended:
        c = SCENARIO61_COMPLETION
        rankings.append(SCENARIO61_THIRD)
        probs.append([c[f"alpha_{k}"] * c[f"R_{d}"] for k, d in enumerate(SCENARIO61_THIRD, start=1)])
    return ExactClickData(tuple(rankings), tuple(tuple(p) for p in probs))


def _check(name, expected, observed, tol, ok=None, detail=""):
    dev = abs(observed - expected) if expected is not None and observed is not None else None
    ok = (dev is not None and dev <= tol) if ok is None else ok
    return {"claim": "scenario61", "check": name, "expected": expected, "observed": observed,
            "deviation": dev, "tolerance": tol, "pass": bool(ok), "detail": detail}


def run_scenario_61(out=None, extended: bool = False, perturb: float | None = None,
                    config: FitConfig = FitConfig(restarts=100, seed=61), fmt: str = "csv") -> VerificationReport:
    """Closed-form peeling plus multi-start fitting on the two-ranking PBM example."""
    start = time.perf_counter()
    data = scenario61_data(extended, perturb)
    template = ParametricClickModel.pbm("ABCD", 4)
    rows = []
    try:
        peel = closed_form_pbm(data)
    except Inconsistent as exc:
        peel = None
        inconsistency = str(exc)
    probe = identifiability_probe(template, data, config)
    sols = probe.solutions
    max_dev = lambda fn: max(abs(fn(s)) for s in sols)
    gap = max(c.loss for c in probe.clusters) - probe.best_loss

    if perturb is not None:
        changed = max_dev(lambda s: s["R_A"] - 0.9) > 1e-6 or max_dev(lambda s: s["alpha_2"] - 0.8) > 1e-6
        rows.append(_check("inconsistency flagged", None, None, 0.0, peel is None,
                           inconsistency if peel is None else ""))
        rows.append(_check("fitted solution changed", None, None, 1e-6, changed,
                           f"best deviance {probe.best_loss!r}"))
        ok = rows[0]["pass"] or rows[1]["pass"]
        for r in rows:
            r["pass"] = ok
    elif extended:
        truth = SCENARIO61_COMPLETION
        for name in template.names:
            if not name.startswith(("alpha", "R")):
                continue
            fitted = probe.clusters[0].params[name]
            rows.append(_check(f"{name} identified", 0.0, probe.spread[name], CLUSTER_RADIUS,
                               detail=f"fitted {fitted!r}"))
            rows.append(_check(f"{name} closed form", truth[name], peel.determined.get(name) if peel else None, 1e-6))
    else:
        for name, truth in (("R_A", 0.9), ("R_B", 0.8), ("alpha_2", 0.8)):
            cf = peel.determined.get(name) if peel else None
            worst = max_dev(lambda s: s[name] - truth)
            rows.append(_check(f"{name} recovered", truth, cf, 1e-6,
                               cf is not None and abs(cf - truth) <= 1e-6 and worst <= 1e-6,
                               f"max fitted deviation {worst!r}"))
        for lhs, rhs, factor in (("R_C", "R_D", 2.0), ("alpha_3", "alpha_4", 4.0)):
            cf = peel.ratio(lhs, rhs) if peel else None
            worst = max_dev(lambda s: s[lhs] - factor * s[rhs])
            rows.append(_check(f"{lhs} = {factor:g} * {rhs}", factor, cf, 1e-4,
                               cf is not None and abs(cf - factor) <= 1e-4 and worst <= 1e-4,
                               f"max fitted |{lhs} - {factor:g} {rhs}| {worst!r}"))
        for name in ("R_C", "R_D"):
            spread = probe.spread[name]
            rows.append(_check(f"{name} not identified", None, spread, 0.05,
                               spread > 0.05 and gap < LOSS_GAP,
                               f"cross-cluster spread {spread!r}, loss gap {gap!r}, {len(probe.clusters)} clusters"))
    passed = all(r["pass"] for r in rows)
    report = VerificationReport(
        "scenario61", tuple(rows), passed, config.seed,
        {"restarts": config.restarts, "converged": len(sols), "clusters": len(probe.clusters)},
        ("claim", "check", "expected", "observed", "deviation", "tolerance", "pass", "detail"),
        tuple(str(c) for c in (peel.constraints if peel else ())),
        time.perf_counter() - start,
    )
    if out is not None:
        report.write(out, fmt)
    return report


# ---------------------------------------------------------------------------
# pairwise ratios

def run_pairwise_check(scenario: Scenario | None = None, pairs: int = 10_000, seed: int = 0,
                       tol: float = 1e-12) -> VerificationReport:
    """Ratios from random relevance pairs must be (1, 1); per-rank assumption checks
    must hold exactly when clicks equal relevance at that rank."""
    start = time.perf_counter()
    g = np.random.default_rng(_rng.derive_seed(seed, "pairwise"))
    draws = g.uniform(1e-6, 1.0 - 1e-6, size=(pairs, 2))
    draws = draws[draws[:, 0] != draws[:, 1]]
    worst = 0.0
    for r1, r2 in draws.tolist():
        t = solve_ratios(r1, r2)
        worst = max(worst, abs(t.t_plus - 1.0), abs(t.t_minus - 1.0))
    rows = [{"claim": "pairwise", "check": "solve_ratios", "rank": None, "holds": None,
             "witness": "", "residual": worst, "pass": worst <= tol}]
    if scenario is None:
        scenario = _single_item_queries({"q1": 0.2, "q2": 0.8}, {}, AffineBehavior((0.5,), (0.1,)))
    scenario.validate()
    rankings = [(q, r) for q in scenario.query_ids() for r, p in scenario.policy.rankings(q) if p > 0]
    depth = max(len(r) for _, r in rankings)
    for k in range(1, depth + 1):
        check = check_assumption(scenario.behavior, scenario.rel, rankings, k)
        identity = all(abs(p - rv) <= 1e-9 for _, rv, p in check.points)
        consistent = check.holds == identity or (check.holds and len({rv for _, rv, _ in check.points}) < 2)
        witness = f"{check.witness[0]}" if not check.holds else ""
        ratios = check.ratios
        detail = (f"t+={ratios.t_plus!r} t-={ratios.t_minus!r}" if isinstance(ratios, PairwiseRatios)
                  else ("underdetermined" if check.holds else "no ratios fit"))
        rows.append({"claim": "pairwise", "check": f"assumption at rank {k} ({detail})", "rank": k,
                     "holds": check.holds, "witness": witness, "residual": check.witness[1], "pass": consistent})
    return VerificationReport(
        "pairwise", tuple(rows), all(r["pass"] for r in rows), seed, {"pairs": int(len(draws))},
        ("claim", "check", "rank", "holds", "witness", "residual", "pass"), (),
        time.perf_counter() - start,
    )


def merge_reports(claim: str, reports: Sequence[VerificationReport]) -> VerificationReport:
    """Concatenate same-shaped reports; the merged report passes iff all parts do."""
    columns = reports[0].columns
    rows = tuple(r for rep in reports for r in rep.rows)
    notes = tuple(f"{rep.claim}: {n}" for rep in reports for n in rep.notes)
    sizes = {f"{rep.claim}.{k}": v for rep in reports for k, v in rep.sizes.items()}
    return VerificationReport(claim, rows, all(r.passed for r in reports), reports[0].seed, sizes,
                              columns, notes, sum(r.wall_time for r in reports))


# ---------------------------------------------------------------------------
# default scenarios for the command line

def matched_affine_scenario(alpha: float = 0.8, beta: float = 0.2, relevance: float = 0.5,
                            correction: str = "affine", clip: ClipSchedule | None = None) -> Scenario:
    base = _single_item_queries({"q": relevance}, {}, AffineBehavior((alpha,), (beta,)))
    spec = EstimatorSpec(correction, clip=clip or EstimatorSpec().clip)
    return replace(base, estimator=spec)
