"""Command line: ``clicklab {simulate,estimate,fit,verify,curves}``.

Exit status is 0 when every requested check passes, 1 when a verification
fails and 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace

from . import harness
from .behavior import sample_log
from .clickfit import ExactClickData, FitConfig, ParametricClickModel, closed_form_pbm, identifiability_probe
from .config import load_scenario
from .core import read_logs, serialize_log
from .errors import ClickLabError, ConfigError, Inconsistent
from .estimators import ClipSchedule

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _counts(text: str) -> list:
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated counts, got {text!r}") from None


def _count(text: str) -> int:
    # accepts 1e6 as well as 1000000
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count, got {text!r}") from None
    if value != int(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return int(value)


def _scenario(args, required=True):
    if args.config is None:
        if required:
            raise _UsageError("--config is required")
        return None
    return load_scenario(args.config)


def _pick_query(scenario, args):
    queries = scenario.query_ids()
    if args.query is not None:
        for q in queries:
            if str(q) == args.query:
                return q
        raise _UsageError(f"query {args.query!r} not in scenario")
    if len(queries) > 1:
        raise _UsageError("scenario has several queries; choose one with --query")
    return queries[0]


# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    scenario = _scenario(args)
    parts = [serialize_log(sample_log(scenario.behavior, scenario.rel, q, scenario.policy, args.n,
                                      args.seed, workers=args.workers))
             for q in scenario.query_ids()]
    _emit("".join(parts), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    scenario = _scenario(args)
    logs = read_logs(args.log)
    query = _pick_query(replace(scenario, queries=tuple((q, 1.0) for q in logs)), args) if logs else None
    if query is None:
        raise _UsageError("log file is empty")
    est = harness.estimate_log(scenario, logs[query])
    rows = [{"item_id": d, "estimate": v, "n_used": est.n_used} for d, v in est.estimates.items()]
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item_id", "estimate", "n_used"])
        for r in rows:
            w.writerow([r["item_id"], repr(r["estimate"]), r["n_used"]])
        text = buf.getvalue()
    _emit(text, args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    scenario = _scenario(args)
    query = _pick_query(scenario, args)
    spec = scenario.fit or harness.FitSpec()
    items = scenario.items(query)
    ranks = max(len(r) for r, p in scenario.policy.rankings(query) if p > 0)
    build = ParametricClickModel.pbm if spec.model == "pbm" else ParametricClickModel.affine
    template = build(items, ranks, anchors=dict(spec.anchors))
    if args.log is not None:
        logs = read_logs(args.log)
        if query not in logs:
            raise _UsageError(f"log holds no impressions for query {query!r}")
        data = logs[query]
    else:
        data = ExactClickData.from_behavior(scenario.behavior, scenario.policy, scenario.rel, query)
    probe = identifiability_probe(template, data, FitConfig(restarts=args.restarts, seed=args.seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "value", "identified", "spread"])
    for name, v in probe.clusters[0].params.items():
        w.writerow([name, repr(float(v)), int(probe.identified(name)), repr(float(probe.spread[name]))])
    _emit(buf.getvalue(), args.out)
    if spec.model == "pbm" and isinstance(data, ExactClickData):
        try:
            peel = closed_form_pbm(data, dict(spec.anchors))
            for c in peel.constraints:
                print(f"constraint: {c}", file=sys.stderr)
        except Inconsistent as exc:
            print(f"closed form: {exc}", file=sys.stderr)
    return EXIT_OK


def _default_scenario(kind: str):
    if kind == "consistency":
        return harness.matched_affine_scenario(0.05, 0.0, 0.5, clip=ClipSchedule.adaptive(1.0))
    return harness.matched_affine_scenario()


def cmd_verify(args) -> int:
    kind = args.claim
    if kind == "unbiasedness":
        scenario = _scenario(args, required=False) or _default_scenario(kind)
        report = harness.run_unbiasedness_test(scenario, args.n or 10**4, args.replications, args.seed, args.workers)
    elif kind == "consistency":
        scenario = _scenario(args, required=False) or _default_scenario(kind)
        report = harness.run_consistency_test(scenario, args.schedule or harness.DEFAULT_SCHEDULE, args.seed, args.workers)
    elif kind == "feasibility":
        scenario = _scenario(args, required=False)
        if scenario is not None:
            report = harness.run_feasibility_demo(scenario, expect_feasible=args.expect != "infeasible")
        else:
            demos = harness.demo_scenarios()
            names = list(demos) if args.family in (None, "all") else [args.family]
            if any(n not in demos for n in names):
                raise _UsageError(f"unknown family {args.family!r}")
            parts = [harness.run_feasibility_demo(demos[n][0], expect_feasible=demos[n][1], claim=f"feasibility:{n}")
                     for n in names]
            report = harness.merge_reports("feasibility", parts)
    elif kind == "scenario61":
        report = harness.run_scenario_61(extended=args.extended, perturb=args.perturb,
                                         config=FitConfig(restarts=args.restarts or 100, seed=args.seed))
    elif kind == "pairwise":
        scenario = _scenario(args, required=False)
        report = harness.run_pairwise_check(scenario, pairs=args.pairs, seed=args.seed)
    else:  # argparse restricts the choices
        raise _UsageError(f"unknown claim {kind!r}")
    _emit(report.render(args.format), args.out)
    status = "PASS" if report.passed else "FAIL"
    print(f"{report.claim}: {status}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_curves(args) -> int:
    families = [f for chunk in args.family for f in chunk.split(",")]
    rows = harness.curve_rows_for(families, args.grid, s=args.s, kappa=args.kappa, alpha=args.alpha, beta=args.beta)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "relevance", "click_prob"])
    for fam, r, p in rows:
        w.writerow([fam, repr(r), repr(p)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clicklab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=0):
        p.add_argument("--config", help="scenario YAML file")
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--out", help="output file (default: stdout)")
        return p

    p = common(sub.add_parser("simulate", help="sample click logs for every query of a scenario"))
    p.add_argument("--n", type=_count, required=True, help="impressions per query")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(run=cmd_simulate)

    p = common(sub.add_parser("estimate", help="relevance estimates from a click log"))
    p.add_argument("--log", required=True)
    p.add_argument("--query")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(run=cmd_estimate)

    p = common(sub.add_parser("fit", help="fit a click model and probe identifiability"))
    p.add_argument("--log", help="fit to a click log instead of exact click probabilities")
    p.add_argument("--query")
    p.add_argument("--restarts", type=int, default=20)
    p.set_defaults(run=cmd_fit)

    p = common(sub.add_parser("verify", help="run a verification and report pass/fail"))
    p.add_argument("claim", choices=("unbiasedness", "consistency", "feasibility", "scenario61", "pairwise"))
    p.add_argument("--n", type=_count, help="impressions per replication")
    p.add_argument("--replications", type=int, default=50)
    p.add_argument("--schedule", type=_counts, help="comma-separated log sizes, e.g. 1e2,1e4,1e6")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--family", help="feasibility scenario: affine, cascade, plackett_luce or all")
    p.add_argument("--expect", choices=("feasible", "infeasible"), default="feasible")
    p.add_argument("--extended", action="store_true", help="add the third ranking to the two-ranking example")
    p.add_argument("--perturb", type=float, help="replace the first click probability of the example")
    p.add_argument("--restarts", type=int)
    p.add_argument("--pairs", type=int, default=10_000)
    p.set_defaults(run=cmd_verify)

    p = sub.add_parser("curves", help="click probability as a function of relevance")
    p.add_argument("--family", action="append", required=True, help="plackett_luce, cascade or affine")
    p.add_argument("--grid", type=int, default=101, help="number of evenly spaced relevances in [0, 1]")
    p.add_argument("--s", type=float, default=0.01, help="Plackett-Luce mass of the other items")
    p.add_argument("--kappa", type=float, default=0.7, help="cascade continuation probability")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(run=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except (_UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"clicklab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ClickLabError, ValueError, OSError) as exc:
        print(f"clicklab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


cli_main = main
