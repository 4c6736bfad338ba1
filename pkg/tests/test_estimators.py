import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import fixed_fit, linear_frame, make_frame
from genpop.estimators import (
    BootstrapError, CollinearityWarning, EstimationError, Workspace, estimate, estimate_all,
    estimate_eblup, estimate_ipw, estimate_outcome_model, estimate_tmle, fay_herriot_reml,
    linear_fit, shrinkage_convex,
)
from genpop.estimators import bootstrap as boot
from genpop.estimators.core import reml_loglik
from genpop.frame import filter_policy
from genpop.redefine import original, trim_minmax

POINT = ("ipw", "outcome_model", "tmle", "eblup")


def ipw_frame():
    # treated y = 3, 5 with e = 1/2, 1/3; control y = 1, 2 with e = 1/4, 1/5
    frame = make_frame([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1, 1, 1, 1, 0, 0], [1, 1, 0, 0, 0, 0],
                       {"Y": [3, 5, 1, 2, 0, 0]})
    fit = fixed_fit(frame, [1 / 2, 1 / 3, 1 / 4, 1 / 5, 0.1, 0.1])
    return frame, fit


def ipw_oracle(ys, es, zs):
    """Exact rational Hajek odds-weighted difference."""
    arms = {}
    for y, e, z in zip(ys, es, zs):
        w = (1 - e) / e
        num, den = arms.get(z, (Fraction(0), Fraction(0)))
        arms[z] = (num + w * y, den + w)
    return arms[1][0] / arms[1][1] - arms[0][0] / arms[0][1]


class TestIpw:
    def test_rational_oracle(self):
        frame, fit = ipw_frame()
        expected = ipw_oracle([3, 5, 1, 2], [Fraction(1, 2), Fraction(1, 3), Fraction(1, 4), Fraction(1, 5)],
                              [1, 1, 0, 0])
        assert expected == Fraction(58, 21)
        est = estimate_ipw(frame, original(frame), fit, B=0, refit=False)
        assert est.estimate == pytest.approx(58 / 21, abs=1e-12)
        assert np.isnan(est.se) and all(np.isnan(est.ci95))

    def test_effective_sample_size(self):
        frame, fit = ipw_frame()
        d = estimate_ipw(frame, original(frame), fit, B=0, refit=False).diagnostics
        assert d["ess_treated"] == pytest.approx(9 / 5)
        assert d["ess_control"] == pytest.approx(49 / 25)

    def test_out_of_region_sample_units_get_zero_weight(self):
        # the control unit with e = 1/5 sits at x = 0.9, outside the region
        region_frame = make_frame([0.1, 0.2, 0.3, 0.9, 0.5, 0.6], [1, 1, 1, 1, 0, 0], [1, 1, 0, 0, 0, 0],
                                  {"Y": [3, 5, 1, 2, 0, 0]})
        sub = filter_policy(region_frame, "x1<0.7")
        fit = fixed_fit(region_frame, [1 / 2, 1 / 3, 1 / 4, 1 / 5, 0.1, 0.1])
        est = estimate_ipw(region_frame, sub, fit, B=0, refit=False)
        assert est.estimate == pytest.approx(13 / 3 - 1, abs=1e-12)

    def test_refit_false_needs_fit(self):
        frame, _ = ipw_frame()
        with pytest.raises(EstimationError):
            estimate_ipw(frame, original(frame), None, B=0, refit=False)


class TestOutcomeModel:
    def test_hand_regressions(self):
        # treated: y = 0.5 + 2.5 x; control: y = 0.5 x; population mean x = 3
        frame = make_frame([0, 1, 2, 0, 2, 2, 4], [1, 1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 0, 0],
                           {"Y": [1, 2, 6, 0, 1, 0, 0]})
        est = estimate_outcome_model(frame, original(frame), B=0)
        assert est.estimate == pytest.approx(6.5, abs=1e-12)

    def test_collinear_column_warns(self, rng):
        x = rng.normal(size=(60, 1))
        x = np.column_stack([x, 2 * x])
        s = np.r_[np.ones(20, bool), np.zeros(40, bool)]
        frame = make_frame(x, s, np.r_[np.arange(20) % 2, np.zeros(40)], {"Y": x[:, 0]})
        with pytest.warns(CollinearityWarning):
            estimate_outcome_model(frame, original(frame), B=0)

    def test_intercept_only_raises(self):
        with pytest.raises(EstimationError, match="intercept only"):
            linear_fit(np.ones((4, 2)), np.arange(4.0))

    def test_no_covariates_is_a_mean(self):
        f = linear_fit(np.empty((3, 0)), np.array([1.0, 2.0, 6.0]))
        assert f(np.empty((2, 0))) == pytest.approx([3.0, 3.0])


class TestTmle:
    def test_estimating_equations_hold(self, rng):
        frame = linear_frame(rng, noise=1.0, baseline=lambda x: x[:, 0] ** 2 + x[:, 1])
        d = estimate_tmle(frame, original(frame), B=0).diagnostics
        assert abs(d["equation_treated"]) < 1e-8
        assert abs(d["equation_control"]) < 1e-8

    def test_correct_linear_model_leaves_no_fluctuation(self, rng):
        frame = linear_frame(rng, tau=2.0)
        est = estimate_tmle(frame, original(frame), B=0)
        assert abs(est.diagnostics["epsilon_treated"]) < 1e-8
        assert est.estimate == pytest.approx(2.0, abs=1e-9)


class TestEblup:
    def test_reml_matches_direct_maximization(self):
        rng = np.random.default_rng(7)
        X = np.column_stack([np.ones(8), rng.normal(size=8)])
        psi = rng.uniform(0.2, 1.0, 8)
        theta = X @ [1.0, 0.5] + rng.normal(0, 1.2, 8) + rng.normal(0, np.sqrt(psi))
        A, beta, ok = fay_herriot_reml(theta, psi, X)
        assert ok
        best = minimize_scalar(lambda a: -reml_loglik(a, theta, psi, X), bounds=(0, 50),
                               method="bounded", options={"xatol": 1e-10})
        assert A == pytest.approx(best.x, abs=1e-5)
        # GLS coefficients at A, computed by hand
        V = np.diag(1 / (A + psi))
        expected = np.linalg.solve(X.T @ V @ X, X.T @ V @ theta)
        assert np.allclose(beta, expected)

    def test_zero_between_area_variance(self):
        theta = np.array([1.0, 1.0, 1.0, 1.0])
        A, beta, _ = fay_herriot_reml(theta, np.ones(4), np.ones((4, 1)))
        assert A == 0.0 and beta[0] == pytest.approx(1.0)

    def test_needs_more_areas_than_coefficients(self):
        with pytest.raises(EstimationError):
            fay_herriot_reml([1.0, 2.0], [1.0, 1.0], np.ones((2, 2)))

    def test_shrinkage_lies_between_direct_and_synthetic(self, rng):
        frame = linear_frame(rng, n_sample=80, noise=1.0)
        d = estimate_eblup(frame, original(frame), B=0).diagnostics
        assert d["fallback"] is None
        assert shrinkage_convex(d).all()
        gamma = np.asarray(d["gamma"], dtype=float)
        ok = ~np.isnan(gamma)
        assert np.all((gamma[ok] >= 0) & (gamma[ok] <= 1))

    def test_constant_effect_is_exact_with_noise_free_outcomes(self, rng):
        frame = linear_frame(rng, n_sample=80, baseline=lambda x: np.zeros(len(x)), tau=1.5)
        assert estimate_eblup(frame, original(frame), B=0).estimate == pytest.approx(1.5, abs=1e-10)

    def test_single_stratum_falls_back(self):
        frame = make_frame(np.r_[0.1, 0.11, 0.12, 0.13, np.linspace(0, 1, 20)], np.r_[np.ones(4), np.zeros(20)],
                           np.r_[1, 0, 1, 0, np.zeros(20)], {"Y": np.r_[2, 1, 4, 1, np.zeros(20)]})
        fit = fixed_fit(frame, np.r_[0.1, 0.11, 0.12, 0.13, np.linspace(0.05, 0.9, 20)])
        d = estimate_eblup(frame, original(frame), fit, B=0, refit=False).diagnostics
        assert d["fallback"] == "single_direct"


class TestConstantEffect:
    @pytest.mark.parametrize("estimator", POINT)
    def test_exact_under_constant_baseline(self, rng, estimator):
        frame = linear_frame(rng, baseline=lambda x: np.full(len(x), 4.0), tau=0.7)
        assert estimate(estimator, frame, original(frame), B=0).estimate == pytest.approx(0.7, abs=1e-10)

    @pytest.mark.parametrize("estimator", ("outcome_model", "tmle"))
    def test_exact_under_linear_baseline(self, rng, estimator):
        frame = linear_frame(rng, tau=-1.2)
        sub = trim_minmax(frame, fixed_fit(frame, np.linspace(0.1, 0.9, frame.n_sample + frame.n_population)))
        assert estimate(estimator, frame, sub, B=0).estimate == pytest.approx(-1.2, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.randoms(use_true_random=False))
def test_row_order_does_not_matter(rnd):
    rng = np.random.default_rng(21)
    frame = linear_frame(rng, n_sample=30, n_pop=120, noise=1.0)
    perm = list(range(len(frame.ids)))
    rnd.shuffle(perm)
    ys = frame.outcome("Y")[perm]
    z = frame.treatment[perm]
    s = frame.in_sample[perm]
    shuffled = make_frame(frame.covariates[perm], s, z, {"Y": np.where(s, ys, 0)},
                          ids=tuple(np.asarray(frame.ids)[perm]))
    a = estimate_all(frame, original(frame), estimators=POINT, B=0)
    b = estimate_all(shuffled, original(shuffled), estimators=POINT, B=0)
    for x, y in zip(a, b):
        assert x.estimate == pytest.approx(y.estimate, abs=1e-9)


class TestBootstrap:
    @pytest.fixture
    def frame(self, rng):
        return linear_frame(rng, n_sample=40, n_pop=200, noise=1.0)

    def test_deterministic_and_seed_sensitive(self, frame):
        sub = original(frame)
        a = estimate_all(frame, sub, estimators=POINT, B=60, seed=3)
        b = estimate_all(frame, sub, estimators=POINT, B=60, seed=3)
        c = estimate_all(frame, sub, estimators=("ipw",), B=60, seed=4)
        assert [(e.se, e.ci95) for e in a] == [(e.se, e.ci95) for e in b]
        assert a[0].se != c[0].se

    def test_threads_give_identical_numbers(self, frame, monkeypatch):
        sub = original(frame)
        serial = estimate_all(frame, sub, estimators=POINT, B=60, seed=9)
        monkeypatch.setenv("GENPOP_THREADS", "3")
        threaded = estimate_all(frame, sub, estimators=POINT, B=60, seed=9)
        assert [(e.se, e.ci95) for e in serial] == [(e.se, e.ci95) for e in threaded]

    def test_interval_contains_estimate(self, frame):
        for est in estimate_all(frame, original(frame), estimators=POINT, B=50, seed=1):
            assert est.ci95[0] <= est.estimate <= est.ci95[1]
            assert est.se > 0

    def test_shared_replicates_match_single_calls(self, frame):
        sub = original(frame)
        joint = estimate_all(frame, sub, estimators=("ipw", "tmle"), B=50, seed=2)
        alone = estimate(frame=frame, sub=sub, estimator="tmle", B=50, seed=2)
        assert joint[1].se == alone.se

    def test_small_b_rejected(self, frame):
        with pytest.raises(ValueError, match="B >= 50"):
            estimate_ipw(frame, original(frame), B=10)

    @pytest.mark.parametrize("seed", [1.5, True, -1, "3"])
    def test_bad_seed(self, frame, seed):
        with pytest.raises((TypeError, ValueError)):
            estimate_ipw(frame, original(frame), B=0, seed=seed)

    def test_replicate_streams_are_independent_of_order(self):
        a = boot.replicate_rng(5, 7).random(3)
        for r in range(7):
            boot.replicate_rng(5, r).random(100)
        assert np.array_equal(a, boot.replicate_rng(5, 7).random(3))

    def test_resample_keeps_arm_and_region_sizes(self, rng):
        z = np.array([1, 1, 1, 0, 0, 0, 0])
        support = np.array([1, 0, 1, 1, 1, 0, 1], bool)
        idx = boot.resample_index(z, rng, support)
        assert sorted(z[idx]) == sorted(z)
        assert (support[idx] & (z[idx] == 1)).sum() == 2
        assert (support[idx] & (z[idx] == 0)).sum() == 3

    def test_too_many_failures_raise(self):
        values = np.r_[np.full(11, np.nan), np.ones(39)]
        with pytest.raises(BootstrapError) as info:
            boot.summarize(values, {"EstimationError: boom": 11}, 1.0)
        assert info.value.census == {"EstimationError: boom": 11}
        se, ci, widened, failed = boot.summarize(np.r_[np.full(10, np.nan), np.arange(40.0)], {}, 50.0)
        assert failed == 10 and widened and ci[1] == 50.0

    def test_failing_core_is_counted(self, frame):
        ws = Workspace.from_frame(frame, original(frame))
        calls = iter(range(1000))

        def flaky(rws, y, warn):
            if next(calls) % 2:
                raise EstimationError("flaky")
            return 1.0, {}

        out = boot.run_replicates(ws, {"Y": np.zeros(frame.n_sample)}, {"flaky": flaky}, 50, 0)
        values, census = out[("flaky", "Y")]
        assert np.isnan(values).sum() == 25
        assert census == {"EstimationError: flaky": 25}
        with pytest.raises(BootstrapError):
            boot.summarize(values, census, 1.0)


def test_unknown_estimator_and_outcome(rng):
    frame = linear_frame(rng)
    with pytest.raises(ValueError):
        estimate_all(frame, original(frame), estimators=("nope",), B=0)
    with pytest.raises(ValueError):
        estimate_all(frame, original(frame), outcomes=["Z"], B=0)


def test_result_fields(rng):
    frame = linear_frame(rng)
    sub = original(frame)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        est = estimate_ipw(frame, sub, B=0, seed=11)
    assert (est.estimator, est.outcome, est.subpopulation, est.n0, est.seed) == (
        "ipw", "Y", sub.label, sub.n0, 11)
    d = est.to_dict()
    assert np.isnan(d["se"]) and d["diagnostics"]["bootstrap_b"] == 0
