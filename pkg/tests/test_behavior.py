import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clicklab import rng as crng
from clicklab.behavior import (
    AffineBehavior,
    CascadeBehavior,
    PlackettLuceBehavior,
    affinity_check,
    click_prob,
    click_probs,
    exposure_context,
    exposure_contexts,
    sample_impression,
    sample_log,
)
from clicklab.core import ChoiceSetMass, ExposureProbability, LoggingPolicy, Position, Ranking, RelevanceTable
from clicklab.errors import DegenerateChoiceSet, InsufficientPoints


def _cascade_bruteforce(rs):
    """P(click at each rank) by enumerating every attraction outcome; the first success is clicked."""
    rs = [Fraction(r) for r in rs]
    out = [Fraction(0)] * len(rs)
    for outcome in itertools.product((0, 1), repeat=len(rs)):
        p = Fraction(1)
        for r, o in zip(rs, outcome):
            p *= r if o else 1 - r
        if 1 in outcome:
            out[outcome.index(1)] += p
    return out


class TestClickProb:
    def test_affine(self):
        rel = RelevanceTable({("q", "d"): 0.6})
        assert click_prob(AffineBehavior((0.5,), (0.2,)), rel, "q", Ranking("d"), "d") == pytest.approx(0.5, abs=1e-15)

    def test_plackett_luce_equal_mass(self):
        rel = RelevanceTable.from_nested({"q": {"d": 0.01, "e": 0.004, "f": 0.006}})
        assert click_prob(PlackettLuceBehavior(), rel, "q", Ranking("efd"), "d") == pytest.approx(0.5, abs=1e-15)

    def test_cascade_one_factor(self):
        rel = RelevanceTable.from_nested({"q": {"a": 0.5, "b": 0.6}})
        assert click_prob(CascadeBehavior(), rel, "q", Ranking("ab"), "b") == pytest.approx(0.3, abs=1e-15)

    def test_cascade_kappa_07_against_enumeration(self):
        r1, r2 = Fraction(1, 8), Fraction(1, 5)  # (7/8)(4/5) = 7/10
        oracle = _cascade_bruteforce([r1, r2, Fraction(1, 2)])
        assert oracle[2] == Fraction(7, 20)
        rel = RelevanceTable.from_nested({"q": {"a": 0.125, "b": 0.2, "d": 0.5}})
        got = click_probs(CascadeBehavior(), rel, "q", Ranking("abd"))
        np.testing.assert_allclose(got, [float(x) for x in oracle], atol=1e-15)
        assert got[2] == pytest.approx(0.35, abs=1e-15)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=5))
    def test_cascade_matches_enumeration(self, rs):
        oracle = [float(x) for x in _cascade_bruteforce(rs)]
        np.testing.assert_allclose(CascadeBehavior().click_probs(np.array(rs)), oracle, atol=1e-12)

    def test_plackett_luce_degenerate(self):
        rel = RelevanceTable.from_nested({"q": {"a": 0.0, "b": 0.0}})
        with pytest.raises(DegenerateChoiceSet):
            click_prob(PlackettLuceBehavior(), rel, "q", Ranking("ab"), "a")

    def test_affine_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            AffineBehavior((0.8,), (0.3,))

    def test_marginal_invariance_witness(self):
        # item a sits at rank 2 both times; only the identity of its neighbour changes
        rel = RelevanceTable.from_nested({"q": {"a": 0.3, "b": 0.9, "c": 0.1}})
        y1, y2 = Ranking("ba"), Ranking("ca")
        aff = AffineBehavior((0.9, 0.6), (0.05, 0.05))
        assert click_prob(aff, rel, "q", y1, "a") == click_prob(aff, rel, "q", y2, "a")
        for beh in (CascadeBehavior(), PlackettLuceBehavior()):
            assert click_prob(beh, rel, "q", y1, "a") != click_prob(beh, rel, "q", y2, "a")


class TestProbabilityRanges:
    @settings(max_examples=200)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8),
           st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=8, max_size=8))
    def test_in_unit_interval(self, rs, ab):
        r = np.array(rs)
        alpha = [a * (1 - b) for a, b in ab]
        beta = [b for _, b in ab]
        behaviors = [AffineBehavior(alpha, beta), CascadeBehavior()]
        if r.sum() > 0:
            behaviors.append(PlackettLuceBehavior())
        for beh in behaviors:
            p = beh.click_probs(r)
            assert np.all((p >= 0) & (p <= 1))
        assert CascadeBehavior().click_probs(r).sum() <= 1 + 1e-12
        if r.sum() > 0:
            assert PlackettLuceBehavior().click_probs(r).sum() == pytest.approx(1.0, abs=1e-12)


class TestContexts:
    def test_examples(self):
        rel = RelevanceTable.from_nested({"q": {"d1": 0.2, "d2": 0.3, "d3": 0.5}})
        y = Ranking(["d1", "d2", "d3"])
        assert exposure_context(AffineBehavior.constant(0.5, 0.1, 3), rel, "q", y, "d3") == Position(3)
        assert exposure_context(CascadeBehavior(), RelevanceTable.from_nested({"q": {"d1": 0.5, "d2": 0.1}}),
                                "q", Ranking(["d1", "d2"]), "d2") == ExposureProbability(0.5)
        ctx = exposure_context(PlackettLuceBehavior(), rel, "q", y, "d1")
        assert isinstance(ctx, ChoiceSetMass) and ctx.mass == pytest.approx(0.8, abs=1e-15)

    @given(st.floats(0.01, 1), st.floats(0.01, 1), st.integers(0, 2))
    def test_context_ignores_own_relevance(self, r_old, r_new, k):
        base = {"a": 0.3, "b": 0.6, "c": 0.2}
        y = Ranking("abc")
        d = "abc"[k]
        for beh in (AffineBehavior.constant(0.5, 0.1, 3), CascadeBehavior(), PlackettLuceBehavior()):
            c0 = exposure_context(beh, RelevanceTable.from_nested({"q": {**base, d: r_old}}), "q", y, d)
            c1 = exposure_context(beh, RelevanceTable.from_nested({"q": {**base, d: r_new}}), "q", y, d)
            assert c0.key == c1.key


class TestSampling:
    def _stream(self, i, seed=1):
        return crng.ImpressionStream(seed, "q", i)

    def test_certain_clicks(self):
        rel = RelevanceTable.from_nested({"q": {"a": 1.0, "b": 1.0}})
        beh = AffineBehavior.constant(1.0, 0.0, 2)
        for i in range(50):
            imp = sample_impression(beh, rel, "q", Ranking("ab"), self._stream(i))
            assert imp.clicks == {"a": 1, "b": 1}

    def test_single_item_plackett_luce(self):
        rel = RelevanceTable({("q", "a"): 0.2})
        for i in range(50):
            assert sample_impression(PlackettLuceBehavior(), rel, "q", Ranking("a"), self._stream(i)).clicks == {"a": 1}

    def test_cascade_all_zero(self):
        rel = RelevanceTable.from_nested({"q": {"a": 0.0, "b": 0.0}})
        log = sample_log(CascadeBehavior(), rel, "q", LoggingPolicy.deterministic({"q": "ab"}), 2000, 3)
        assert log.clicks.sum() == 0

    def test_single_impression_matches_bulk(self, rel_abc, policy_abc):
        beh = AffineBehavior((0.9, 0.5, 0.2), (0.05, 0.1, 0.1))
        log = sample_log(beh, rel_abc, "q", policy_abc, 300, 11)
        for i in (0, 17, 299):
            imp = log.impression(i)
            again = sample_impression(beh, rel_abc, "q", imp.ranking, crng.ImpressionStream(11, "q", i))
            assert again == imp

    @pytest.mark.parametrize("beh", [AffineBehavior((0.9, 0.5, 0.2), (0.05, 0.1, 0.1)),
                                     CascadeBehavior(), PlackettLuceBehavior()])
    def test_binomial_concentration(self, beh, rel_abc, policy_abc):
        n = 200_000
        log = sample_log(beh, rel_abc, "q", policy_abc, n, 5)
        index = {d: i for i, d in enumerate(log.items)}
        for ranking, _ in policy_abc.rankings("q"):
            row = np.array([index[d] for d in ranking.items])
            mask = np.all(log.slots[:, :3] == row, axis=1)
            m = int(mask.sum())
            freq = log.clicks[mask, :3].mean(axis=0)
            p = click_probs(beh, rel_abc, "q", ranking)
            bound = 4 * np.sqrt(p * (1 - p) / m)
            assert np.all(np.abs(freq - p) <= np.maximum(bound, 1e-12))

    def test_click_structure(self, rel_abc, policy_abc):
        casc = sample_log(CascadeBehavior(), rel_abc, "q", policy_abc, 20_000, 2)
        assert casc.clicks.sum(axis=1).max() <= 1
        pl = sample_log(PlackettLuceBehavior(), rel_abc, "q", policy_abc, 20_000, 2)
        assert np.all(pl.clicks.sum(axis=1) == 1)

    def test_policy_frequencies(self, rel_abc, policy_abc):
        n = 100_000
        log = sample_log(CascadeBehavior(), rel_abc, "q", policy_abc, n, 9)
        index = {d: i for i, d in enumerate(log.items)}
        for ranking, p in policy_abc.rankings("q"):
            row = np.array([index[d] for d in ranking.items])
            freq = np.all(log.slots[:, :3] == row, axis=1).mean()
            assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n)

    def test_worker_and_chunk_independence(self, rel_abc, policy_abc):
        beh = PlackettLuceBehavior()
        a = sample_log(beh, rel_abc, "q", policy_abc, 5000, 42)
        b = sample_log(beh, rel_abc, "q", policy_abc, 5000, 42, workers=4, chunk=333)
        assert a == b
        assert sample_log(beh, rel_abc, "q", policy_abc, 5000, 43) != a

    def test_prefix_stability(self, rel_abc, policy_abc):
        beh = CascadeBehavior()
        big = sample_log(beh, rel_abc, "q", policy_abc, 3000, 8)
        assert big.head(1000) == sample_log(beh, rel_abc, "q", policy_abc, 1000, 8)


class TestAffinity:
    def test_cascade_points(self):
        res = affinity_check([(0.1, 0.07), (0.5, 0.35), (0.9, 0.63)])
        assert res.affine and res.max_residual <= 1e-12
        assert res.alpha == pytest.approx(0.7, abs=1e-12) and res.beta == pytest.approx(0.0, abs=1e-12)

    def test_plackett_luce_points(self):
        pts = [(r, r / (r + 0.01)) for r in (0.1, 0.5, 0.9)]
        np.testing.assert_allclose([p for _, p in pts], [0.909091, 0.980392, 0.989011], atol=1e-6)
        # independent oracle: normal equations solved by hand
        x = np.array([r for r, _ in pts])
        y = np.array([p for _, p in pts])
        slope = ((x - x.mean()) * (y - y.mean())).sum() / ((x - x.mean()) ** 2).sum()
        icpt = y.mean() - slope * x.mean()
        oracle_resid = np.abs(y - (slope * x + icpt)).max()
        res = affinity_check(pts)
        assert not res.affine and res.max_residual > 0.01
        assert res.max_residual == pytest.approx(oracle_resid, rel=1e-9)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_two_points_fit(self, r1, p1, r2, p2):
        if abs(r1 - r2) < 1e-3:
            return
        res = affinity_check([(r1, p1), (r2, p2)])
        assert res.affine and res.max_residual <= 1e-12

    def test_insufficient(self):
        with pytest.raises(InsufficientPoints):
            affinity_check([(0.5, 0.1), (0.5, 0.2)])


def test_exposure_contexts_cover_ranking(rel_abc):
    ctx = exposure_contexts(CascadeBehavior(), rel_abc, "q", Ranking("CAB"))
    assert set(ctx) == {"A", "B", "C"}
    assert ctx["B"].kappa == pytest.approx((1 - 0.1) * (1 - 0.9), abs=1e-15)
