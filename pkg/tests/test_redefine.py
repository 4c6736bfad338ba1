import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixed_fit, make_frame
from genpop.diagnostics import overlap
from genpop.frame import FrameError
from genpop.propensity import fit_propensity
from genpop.redefine import (
    CRUMP_FALLBACK, build, crump_alpha, original, reproduce, solve_crump_alpha, trim_covariates,
    trim_crump, trim_minmax, trim_quantile,
)
from genpop.subpopulation import Subpopulation


def crump_condition(alpha, scores):
    """1/(a(1-a)) - 2 E[g(e) | a <= e <= 1-a]; nan when nothing is retained."""
    e = np.asarray(scores)
    keep = (e >= alpha) & (e <= 1 - alpha)
    if not keep.any():
        return np.nan
    return 1 / (alpha * (1 - alpha)) - 2 * np.mean(1 / (e[keep] * (1 - e[keep])))


def brute_force_alpha(scores, grid=200001):
    """Smallest grid alpha in (0, 0.5] where the condition changes sign (or hits zero)."""
    a = np.linspace(1e-7, 0.5, grid)
    f = np.array([crump_condition(x, scores) for x in a])
    sign = np.sign(f)
    hits = np.flatnonzero((sign[:-1] > 0) & (sign[1:] <= 0))
    return a[hits[0] + 1] if hits.size else None


def scored_frame(pop_scores, sample_scores=(0.3, 0.4, 0.5, 0.6)):
    """Frame whose only covariate is the score itself, plus a fit returning those scores."""
    e = np.r_[sample_scores, pop_scores]
    n = len(sample_scores)
    s = np.r_[np.ones(n, bool), np.zeros(len(pop_scores), bool)]
    z = np.r_[np.arange(n) % 2, np.zeros(len(pop_scores), int)]
    frame = make_frame(e, s, z)
    return frame, fixed_fit(frame, e)


class TestCrumpAlpha:
    def test_all_half(self):
        alpha, solved = solve_crump_alpha(np.full(50, 0.5))
        assert solved
        assert alpha == pytest.approx((1 - math.sqrt(0.5)) / 2, abs=1e-6)
        assert alpha == pytest.approx(0.1464466, abs=1e-6)

    def test_uniform_middle_keeps_everything(self):
        e = np.linspace(0.4, 0.6, 101)
        alpha = crump_alpha(e)
        assert alpha < 0.4
        assert abs(crump_condition(alpha, e)) < 1e-9

    def test_single_score(self):
        alpha, solved = solve_crump_alpha([0.9])
        # one candidate: g = 1/0.09, so alpha solves a(1-a) = 0.09/2
        assert solved
        assert alpha == pytest.approx((1 - math.sqrt(1 - 4 * 0.045)) / 2, abs=1e-12)
        assert alpha == pytest.approx(brute_force_alpha([0.9]), abs=1e-5)

    def test_fallback_when_no_root(self):
        # most mass at the extremes: the condition is positive everywhere
        alpha, solved = solve_crump_alpha(np.r_[np.full(5, 1e-6), 0.5])
        if not solved:
            assert alpha == CRUMP_FALLBACK

    def test_errors(self):
        with pytest.raises(ValueError):
            crump_alpha([])
        with pytest.raises(ValueError):
            crump_alpha([0.0, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=40))
    def test_matches_brute_force_scan(self, scores):
        alpha, solved = solve_crump_alpha(scores)
        assert 0 < alpha <= 0.5
        brute = brute_force_alpha(scores, grid=20001)
        if solved:
            assert abs(crump_condition(alpha, scores)) < 1e-6 * (1 + 1 / (alpha * (1 - alpha)))
            assert brute is not None and alpha <= brute + 0.5 / 20000
        else:
            assert alpha == CRUMP_FALLBACK


class TestTrimCrump:
    def test_all_half_keeps_everyone(self):
        frame, fit = scored_frame(np.full(20, 0.5), sample_scores=(0.5,) * 4)
        sub = trim_crump(frame, fit)
        assert sub.n0 == 20
        assert sub.provenance["alpha_source"] == "solved"

    def test_override_zero_is_original(self):
        frame, fit = scored_frame([0.001, 0.2, 0.999])
        assert np.array_equal(trim_crump(frame, fit, alpha=0).mask, original(frame).mask)

    def test_override_interval(self):
        frame, fit = scored_frame([0.05, 0.15, 0.95])
        sub = trim_crump(frame, fit, alpha=0.1)
        assert [e for e, m in zip(fit.scores[4:], sub.population_mask[4:]) if m] == [0.15]
        assert sub.provenance == {"alpha": 0.1, "alpha_source": "override"}

    def test_bimodal_matches_interval_filter(self):
        rng = np.random.default_rng(2)
        e = np.r_[rng.beta(2, 30, 200), rng.beta(30, 2, 40), rng.uniform(0.2, 0.8, 60)]
        frame, fit = scored_frame(e)
        sub = trim_crump(frame, fit)
        a = sub.provenance["alpha"]
        assert np.array_equal(sub.population_mask[4:], (e >= a) & (e <= 1 - a))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.5), st.floats(0, 0.5))
    def test_antitone_in_alpha(self, a, b):
        e = np.linspace(0.01, 0.99, 60)
        frame, fit = scored_frame(e)
        lo, hi = sorted((a, b))
        try:
            big = trim_crump(frame, fit, alpha=hi)
        except FrameError:
            return
        small = trim_crump(frame, fit, alpha=lo)
        assert set(big.retained_ids) <= set(small.retained_ids)


class TestMinmaxQuantile:
    def test_boundaries_inclusive(self):
        frame, fit = scored_frame([0.1, 0.2, 0.61], sample_scores=(0.2, 0.4, 0.5, 0.6))
        sub = trim_minmax(frame, fit)
        assert list(sub.population_mask[4:]) == [False, True, False]
        assert sub.provenance == {"lower": 0.2, "upper": 0.6}

    def test_nested_population_is_untouched(self):
        frame, fit = scored_frame([0.35, 0.45, 0.55])
        assert trim_minmax(frame, fit).n0 == 3

    def test_quantile_hand_computed(self):
        frame, fit = scored_frame([0.2, 0.26], sample_scores=(0.1, 0.2, 0.3, 0.4))
        sub = trim_quantile(frame, fit, 50)
        assert sub.provenance["cut"] == pytest.approx(0.25)
        assert list(sub.population_mask[4:]) == [True, False]
        assert sub.label == "quantile:50"

    def test_quantile_99_keeps_low_population(self):
        frame, fit = scored_frame([0.1, 0.2, 0.3])
        assert trim_quantile(frame, fit, 99).n0 == 3

    def test_quantile_range(self):
        frame, fit = scored_frame([0.1])
        for q in (49.9, 99.5):
            with pytest.raises(ValueError):
                trim_quantile(frame, fit, q)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=40), st.floats(50, 99), st.floats(50, 99))
    def test_quantile_monotone_in_q(self, pop, q1, q2):
        frame, fit = scored_frame(pop)
        lo, hi = sorted((q1, q2))
        try:
            a = trim_quantile(frame, fit, lo)
        except FrameError:
            return
        assert set(a.retained_ids) <= set(trim_quantile(frame, fit, hi).retained_ids)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=40))
    def test_minmax_then_overlap_is_one(self, pop):
        frame, fit = scored_frame(pop)
        try:
            sub = trim_minmax(frame, fit)
        except FrameError:
            return
        assert overlap(fit.scores[frame.in_sample], fit.scores[sub.population_mask]) == 1.0


class TestCovariates:
    def test_enrollment_example(self):
        x = np.r_[500, 750, 1000, 800, 499, 1000, 1001, 500]
        frame = make_frame(x, [1, 1, 1, 1, 0, 0, 0, 0], [1, 0, 1, 0, 0, 0, 0, 0], names=("enrollment",))
        sub = trim_covariates(frame)
        assert list(sub.population_mask[4:]) == [False, True, False, True]
        assert sub.provenance == {"bounds": {"enrollment": [500.0, 1000.0]}}

    def test_binary_constrains_only_when_constant_in_sample(self):
        x = [[1, 0], [2, 0], [1.5, 1], [1.5, 0]]
        frame = make_frame(x, [1, 1, 0, 0], [1, 0, 0, 0], binary=("x2",))
        sub = trim_covariates(frame)
        assert list(sub.population_mask[2:]) == [False, True]
        x = [[1, 0], [2, 1], [1.5, 1], [1.5, 0]]
        frame = make_frame(x, [1, 1, 0, 0], [1, 0, 0, 0], binary=("x2",))
        assert trim_covariates(frame).n0 == 2

    def test_brute_force_three_covariates(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(300, 3))
        s = np.zeros(300, bool)
        s[:20] = True
        frame = make_frame(x, s, np.r_[np.arange(20) % 2, np.zeros(280, int)])
        sub = trim_covariates(frame)
        expected = set(frame.ids[:20])
        for i in range(20, 300):
            if all(x[:20, j].min() <= x[i, j] <= x[:20, j].max() for j in range(3)):
                expected.add(frame.ids[i])
        assert set(sub.retained_ids) == expected

    def test_idempotent_and_column_order_free(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(200, 3))
        s = np.zeros(200, bool)
        s[:15] = True
        z = np.r_[np.arange(15) % 2, np.zeros(185, int)]
        frame = make_frame(x, s, z)
        sub = trim_covariates(frame)
        again = trim_covariates(frame.restrict(sub))
        assert set(again.retained_ids) == set(sub.retained_ids)
        swapped = make_frame(x[:, [2, 0, 1]], s, z, names=("x3", "x1", "x2"))
        assert trim_covariates(swapped).retained_ids == sub.retained_ids


class TestDispatch:
    @pytest.fixture
    def frame(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(400, 2))
        s = np.zeros(400, bool)
        s[rng.choice(400, 30, replace=False, p=np.exp(x[:, 0]) / np.exp(x[:, 0]).sum())] = True
        z = np.zeros(400, int)
        z[np.flatnonzero(s)[::2]] = 1
        return make_frame(x, s, z)

    @pytest.mark.parametrize("method", ["original", "crump", "minmax", "quantile", "quantile:75",
                                        "covariates", "policy:pos", "policy:neg:x2<0"])
    def test_provenance_reproduces_retained_set(self, frame, method):
        fit = fit_propensity(frame)
        sub = build(frame, fit, method, policies={"pos": "x1>0"})
        assert set(frame.ids[i] for i in np.flatnonzero(frame.in_sample)) <= set(sub.retained_ids)
        assert sub.n0 >= 1
        again = reproduce(frame, fit, sub)
        assert again.retained_ids == sub.retained_ids
        assert np.array_equal(again.region, sub.region)

    def test_unknown(self, frame):
        fit = fit_propensity(frame)
        with pytest.raises(ValueError):
            build(frame, fit, "lasso")
        with pytest.raises(ValueError):
            build(frame, fit, "policy:missing")

    def test_empty_subpopulation(self, frame):
        fit = fit_propensity(frame)
        with pytest.raises(FrameError, match="empty"):
            trim_crump(frame, fit, alpha=0.5)


class TestSubpopulation:
    def test_validation(self):
        ids = ("a", "b", "c")
        s = np.array([True, False, False])
        with pytest.raises(ValueError, match="retain every sample unit"):
            Subpopulation("original", "o", [False, True, True], {}, ids, s)
        with pytest.raises(ValueError, match="empty"):
            Subpopulation("original", "o", [True, False, False], {}, ids, s)
        with pytest.raises(ValueError, match="unknown"):
            Subpopulation("magic", "o", [True, True, True], {}, ids, s)
        with pytest.raises(ValueError, match="disagree"):
            Subpopulation("policy", "p", [True, True, False], {}, ids, s, region=[True, True, True])
        sub = Subpopulation("policy", "p", [True, True, False], {"predicates": "x>1"}, ids, s,
                            region=[False, True, False])
        assert sub.n0 == 1 and list(sub.sample_support) == [False]
        d = sub.to_dict()
        assert d["retained_ids"] == ["a", "b"] and d["sample_in_region"] == 0
