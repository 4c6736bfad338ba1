import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_frame
from genpop.propensity import CLIP, PropensityError, fit_propensity, fit_selection, score
from genpop.frame import CovariateSchema, CovariateSpec, UnitFrame


def noise_frame(seed, n=100, N=1000, p=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n + N, p))
    s = np.r_[np.ones(n, bool), np.zeros(N, bool)]
    z = np.r_[np.arange(n) % 2, np.zeros(N, int)]
    return make_frame(x, s, z)


def selected_frame(seed, n=60, N=600):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.normal(50, 10, n + N), rng.uniform(size=n + N),
                         rng.normal(1e5, 3e4, n + N), rng.integers(0, 2, n + N)])
    lin = -2.5 + 0.08 * (x[:, 0] - 50) + 1.0 * x[:, 1] + 0.5 * x[:, 3]
    s = rng.random(n + N) < 1 / (1 + np.exp(-lin))
    z = np.zeros(n + N, int)
    z[np.flatnonzero(s)[::2]] = 1
    return make_frame(x, s, z, binary=("x4",))


class TestFit:
    def test_noise_selection_gives_marginal_rate(self):
        fit = fit_propensity(noise_frame(1))
        assert fit.converged
        assert abs(fit.scores.mean() - 100 / 1100) < 1e-6
        # slopes are pure sampling noise, so most scores sit near the marginal rate
        assert np.quantile(np.abs(fit.scores - 100 / 1100), 0.95) < 0.05

    def test_intercept_only_scores_equal_sample_fraction_exactly(self):
        frame = make_frame(np.ones(7), [1, 1, 1, 0, 0, 0, 0], [1, 0, 1, 0, 0, 0, 0])
        with pytest.warns(UserWarning, match="dropping constant"):
            fit = fit_propensity(frame)
        assert fit.dropped == ("x1",)
        assert np.all(fit.scores == 3 / 7)

    def test_separating_binary_covariate_engages_ridge(self):
        b = np.r_[np.ones(10), np.zeros(90)]
        x = np.column_stack([b, np.random.default_rng(0).normal(size=100)])
        frame = make_frame(x, b.astype(bool), np.r_[np.arange(10) % 2, np.zeros(90)], binary=("x1",))
        fit = fit_propensity(frame)
        assert fit.ridge_lambda >= 1e-4 and fit.converged
        assert np.all((fit.scores > 0) & (fit.scores < 1))
        assert fit.scores[:10].min() > fit.scores[10:].max()

    def test_ridge_exhaustion_raises_with_last_iterate(self, monkeypatch):
        import genpop.propensity as prop
        monkeypatch.setattr(prop, "MAX_ITER", 1)
        frame = selected_frame(3)
        with pytest.raises(PropensityError) as info:
            fit_propensity(frame)
        assert info.value.last_iterate is not None

    def test_needs_both_groups(self):
        with pytest.raises(ValueError):
            fit_selection(np.ones((3, 1)), np.ones(3, bool))

    def test_deviance_non_increasing(self):
        fit = fit_propensity(selected_frame(4))
        hist = np.array(fit.deviance_history)
        assert np.all(np.diff(hist) <= 1e-10)

    def test_score_equation(self):
        fit = fit_propensity(selected_frame(5))
        frame = selected_frame(5)
        assert abs(fit.scores.mean() - frame.sample_fraction) < 1e-6

    def test_deterministic(self):
        a = fit_propensity(selected_frame(6))
        b = fit_propensity(selected_frame(6))
        assert a.coefficients.tobytes() == b.coefficients.tobytes()

    def test_monotone_in_linear_predictor(self):
        frame = selected_frame(7)
        fit = fit_propensity(frame)
        eta = fit.linear_predictor(frame.covariates)
        order = np.argsort(eta)
        assert np.all(np.diff(fit.scores[order]) >= 0)

    def test_original_scale_coefficients_reproduce_predictor(self):
        frame = selected_frame(8)
        fit = fit_propensity(frame)
        beta = fit.original_scale()
        eta = beta[0] + frame.covariates @ beta[1:]
        assert np.allclose(eta, fit.linear_predictor(frame.covariates), atol=1e-9)

    def test_to_dict(self):
        frame = selected_frame(9)
        d = fit_propensity(frame).to_dict()
        assert d["covariates"] == ["x1", "x2", "x3", "x4"]
        assert set(d["scores"]) == set(frame.ids)
        assert d["convergence"]["converged"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.floats(1e-3, 1e3), st.floats(-1e4, 1e4))
def test_affine_rescaling_leaves_scores_unchanged(col, a, b):
    frame = selected_frame(11)
    if col == 3:
        col = 2  # binary covariates are not rescaled
    x = frame.covariates.copy()
    x[:, col] = a * x[:, col] + b
    other = UnitFrame(frame.schema, frame.ids, x, frame.in_sample, frame.treatment, {})
    s1 = fit_propensity(frame).scores
    s2 = fit_propensity(other).scores
    assert np.max(np.abs(s1 - s2)) < 1e-8


class TestScore:
    @pytest.fixture
    def fit(self):
        frame = make_frame([[0.0, 1.0], [1.0, 0.0], [2.0, 1.0], [3.0, 0.0], [4.0, 1.0]],
                           [1, 1, 0, 0, 0], [1, 0, 0, 0, 0])
        return fit_propensity(frame)

    def _with(self, fit, coef):
        object.__setattr__(fit, "coefficients", np.asarray(coef, dtype=float))
        return fit

    def test_zero_coefficients(self, fit):
        assert score(self._with(fit, [0, 0, 0]), [3.0, 7.0]) == 0.5

    def test_intercept_log_one_ninth(self, fit):
        assert score(self._with(fit, [np.log(1 / 9), 0, 0]), [3.0, 7.0]) == pytest.approx(0.1, abs=1e-15)

    def test_clipping(self, fit):
        assert score(self._with(fit, [-20, 0, 0]), [0.0, 0.0]) == CLIP
        assert score(self._with(fit, [40, 0, 0]), [0.0, 0.0]) == 1 - CLIP

    def test_length_mismatch(self, fit):
        with pytest.raises(ValueError):
            score(fit, [1.0])
