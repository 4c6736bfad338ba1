import warnings

import numpy as np
import pytest

from genpop.frame import CovariateSchema, CovariateSpec, GeneralizationWarning, UnitFrame
from genpop.propensity import PropensityFit


def make_schema(*names, binary=()):
    return CovariateSchema(tuple(CovariateSpec(n, "binary" if n in binary else "continuous")
                                 for n in names))


def make_frame(x, in_sample, treatment, outcomes=None, names=None, ids=None, binary=()):
    """Small hand-built frame; silences the not-a-small-study warning."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    names = names or tuple(f"x{j + 1}" for j in range(p))
    ids = ids or tuple(f"u{i:02d}" for i in range(n))
    s = np.asarray(in_sample, bool)
    z = np.where(s, np.asarray(treatment), -1)
    outcomes = outcomes or {}
    ys = {k: np.where(s, np.asarray(v, dtype=float), np.nan) for k, v in outcomes.items()}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GeneralizationWarning)
        return UnitFrame(make_schema(*names, binary=binary), ids, x, s, z, ys)


def fixed_fit(frame, scores):
    """A PropensityFit that just carries the given per-unit scores."""
    p = len(frame.schema)
    fit = PropensityFit(names=frame.schema.names, coefficients=np.zeros(p + 1), center=np.zeros(p),
                        scale=np.ones(p), converged=True, iterations=0, deviance=0.0,
                        deviance_history=(0.0,), ids=frame.ids)
    object.__setattr__(fit, "scores", np.asarray(scores, dtype=float))
    return fit


def linear_frame(rng, n_sample=40, n_pop=400, p=3, tau=1.0, noise=0.0, baseline=None):
    """Random frame with y0 = baseline(x) + noise and y1 = y0 + tau."""
    n = n_sample + n_pop
    x = rng.normal(size=(n, p))
    s = np.zeros(n, bool)
    s[rng.choice(n, n_sample, replace=False, p=_softmax(0.8 * x[:, 0]))] = True
    z = np.full(n, -1)
    idx = np.flatnonzero(s)
    z[idx] = 0
    z[rng.permutation(idx)[: n_sample // 2]] = 1
    y0 = (baseline(x) if baseline is not None else x @ np.linspace(1, -1, p)) + noise * rng.normal(size=n)
    y = np.where(z == 1, y0 + tau, y0)
    return make_frame(x, s, z, {"Y": y})


def _softmax(v):
    w = np.exp(v - v.max())
    return w / w.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
