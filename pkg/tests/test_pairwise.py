from fractions import Fraction

import numpy as np
import pytest

from clicklab.behavior import AffineBehavior
from clicklab.core import RelevanceTable
from clicklab.errors import BoundaryRelevance, EmptyRank
from clicklab.pairwise import PairwiseRatios, Underdetermined, check_assumption, solve_ratios


def _cramer(r1, r2):
    # t+ r + t- (1 - r) = 1 for both relevances, solved exactly
    r1, r2 = Fraction(r1), Fraction(r2)
    det = r1 * (1 - r2) - r2 * (1 - r1)
    return (1 - r2 - (1 - r1)) / det, (r1 - r2) / det


class TestSolveRatios:
    def test_example(self):
        t = solve_ratios(0.3, 0.6)
        assert isinstance(t, PairwiseRatios)
        assert (t.t_plus, t.t_minus) == (1.0, 1.0)

    def test_equal_relevances(self):
        t = solve_ratios(0.5, 0.5)
        assert isinstance(t, Underdetermined)
        assert t.contains(PairwiseRatios(1.0, 1.0))
        assert t.contains(PairwiseRatios(t.t_plus(0.2), 0.2))
        assert not t.contains(PairwiseRatios(1.2, 1.0))

    def test_random_pairs_against_exact_oracle(self):
        g = np.random.default_rng(7)
        for r1, r2 in g.uniform(1e-6, 1 - 1e-6, size=(1000, 2)).tolist():
            t = solve_ratios(r1, r2)
            tp, tm = _cramer(r1, r2)
            assert (tp, tm) == (1, 1)
            assert abs(t.t_plus - float(tp)) <= 1e-12 and abs(t.t_minus - float(tm)) <= 1e-12

    @pytest.mark.parametrize("pair", [(0.0, 0.5), (0.5, 1.0), (-0.1, 0.5), (0.3, 1.2)])
    def test_boundary(self, pair):
        with pytest.raises(BoundaryRelevance):
            solve_ratios(*pair)


class TestCheckAssumption:
    rel = RelevanceTable({("q1", "a"): 0.2, ("q2", "b"): 0.8, ("q1", "c"): 0.5})

    def test_identity_behavior_holds(self):
        check = check_assumption(AffineBehavior((1.0,), (0.0,)), self.rel, [("q1", "a"), ("q2", "b")], 1)
        assert check.holds
        np.testing.assert_allclose([check.ratios.t_plus, check.ratios.t_minus], [1.0, 1.0], atol=1e-12)

    def test_affine_behavior_fails_with_witness(self):
        check = check_assumption(AffineBehavior((0.5,), (0.1,)), self.rel, [("q1", "a"), ("q2", "b")], 1)
        assert not check.holds and check.ratios is None
        assert check.witness[0] in ("a", "b") and check.witness[1] > 1e-3
        implied = sorted(p / r for _, r, p in check.points)
        np.testing.assert_allclose(implied, [0.625, 1.0], atol=1e-12)

    def test_single_item_holds_vacuously(self):
        check = check_assumption(AffineBehavior((0.5,), (0.1,)), self.rel, [("q1", "a")], 1)
        assert check.holds and isinstance(check.ratios, Underdetermined)
        assert check.ratios.contains(PairwiseRatios(1.0, 1.0))

    def test_ratios_are_per_rank(self):
        beh = AffineBehavior((1.0, 0.5), (0.0, 0.1))
        ranks = [("q1", "ac")]
        assert check_assumption(beh, self.rel, ranks, 1).holds
        assert check_assumption(beh, self.rel, ranks, 2).holds  # one item at rank 2

    def test_empty_rank(self):
        with pytest.raises(EmptyRank):
            check_assumption(AffineBehavior((1.0,), (0.0,)), self.rel, [("q1", "a")], 2)

    def test_boundary_relevance(self):
        rel = RelevanceTable({("q", "a"): 1.0, ("q", "b"): 0.5})
        with pytest.raises(BoundaryRelevance):
            check_assumption(AffineBehavior((1.0,), (0.0,)), rel, [("q", "a"), ("q", "b")], 1)
