"""Selection propensity model: P(unit is in the study sample | covariates).

Main-effects logistic regression fit by iteratively reweighted least squares
(Newton-Raphson) on standardized continuous covariates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .frame import UnitFrame

CLIP = 1e-6
MAX_ITER = 100
TOL = 1e-8
SEPARATION_BOUND = 15.0
RIDGE_START = 1e-4
RIDGE_MAX = 1e-1


class PropensityError(RuntimeError):
    """The selection model failed to converge even with a ridge penalty."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Fitted selection model.

    ``coefficients`` are on the standardized scale (intercept first); a
    covariate with ``scale`` 1 and ``center`` 0 is used as is (binary
    covariates). Dropped covariates have coefficient 0. ``scores`` align with
    ``ids``.
    """

    names: tuple
    coefficients: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    deviance_history: tuple = field(repr=False)
    ridge_lambda: float = 0.0
    dropped: tuple = ()
    ids: tuple = field(default=(), repr=False)
    scores: np.ndarray = field(default=None, repr=False)

    def linear_predictor(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} covariates, got {X.shape[1]}")
        return self.coefficients[0] + ((X - self.center) / self.scale) @ self.coefficients[1:]

    def predict(self, X) -> np.ndarray:
        return np.clip(expit(self.linear_predictor(X)), CLIP, 1 - CLIP)

    def score_map(self) -> dict:
        return dict(zip(self.ids, self.scores.tolist()))

    def original_scale(self) -> np.ndarray:
        """Coefficients for the raw covariates (intercept first)."""
        slopes = self.coefficients[1:] / self.scale
        return np.concatenate([[self.coefficients[0] - slopes @ self.center], slopes])

    def to_dict(self) -> dict:
        return {
            "covariates": list(self.names),
            "coefficients_standardized": self.coefficients.tolist(),
            "coefficients_original": self.original_scale().tolist(),
            "standardization": {"center": self.center.tolist(), "scale": self.scale.tolist()},
            "dropped": list(self.dropped),
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "deviance": self.deviance,
                "deviance_history": list(self.deviance_history),
                "ridge_lambda": self.ridge_lambda,
            },
            "scores": self.score_map(),
        }


def score(fit: PropensityFit, covariates) -> float:
    """Selection probability for one covariate vector, clipped to [1e-6, 1 - 1e-6]."""
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 1 or x.shape[0] != len(fit.names):
        raise ValueError(f"expected a vector of {len(fit.names)} covariates")
    return float(fit.predict(x[None, :])[0])


def _objective(X, y, beta, penalty):
    eta = X @ beta
    # -2 log-likelihood, written to stay finite for large |eta|
    dev = 2.0 * (y * np.logaddexp(0.0, -eta) + (1 - y) * np.logaddexp(0.0, eta)).sum()
    return dev + (penalty * beta * beta).sum()


def _irls(X, y, lam, stop_on_separation):
    k = X.shape[1]
    penalty = np.full(k, lam)
    penalty[0] = 0.0
    beta = np.zeros(k)
    dev = _objective(X, y, beta, penalty)
    history = [dev]
    for it in range(1, MAX_ITER + 1):
        mu = expit(X @ beta)
        w = mu * (1 - mu)
        grad = X.T @ (y - mu) - penalty * beta
        hess = (X * w[:, None]).T @ X + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            new = beta + t * step
            new_dev = _objective(X, y, new, penalty)
            if new_dev <= dev + 1e-10 or t < 1e-12:
                break
            t *= 0.5
        delta = np.max(np.abs(new - beta))
        beta, dev = new, new_dev
        history.append(dev)
        if stop_on_separation and np.any(np.abs(beta[1:]) > SEPARATION_BOUND):
            return beta, False, it, history
        if delta < TOL:
            return beta, True, it, history
    return beta, False, MAX_ITER, history


def fit_selection(X, member, continuous=None, names=None, ids=()) -> PropensityFit:
    """Fit the selection model on raw arrays.

    Parameters
    ----------
    X : (n, p) array
        Covariates for every unit (sample and population-only).
    member : (n,) bool array
        True for study-sample units.
    continuous : (p,) bool array, optional
        Which columns to standardize; default all.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    y = np.asarray(member, dtype=float)
    if not (0 < y.sum() < n):
        raise ValueError("need both sample and population-only units")
    continuous = np.ones(p, bool) if continuous is None else np.asarray(continuous, bool)
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(p))

    center = np.zeros(p)
    scale = np.ones(p)
    sd = X.std(axis=0) if p else np.zeros(0)
    keep = sd > 0
    dropped = tuple(nm for nm, k in zip(names, keep) if not k)
    if dropped:
        warnings.warn(f"dropping constant covariates: {', '.join(dropped)}", stacklevel=2)
    std = keep & continuous
    center[std] = X[:, std].mean(axis=0)
    scale[std] = sd[std]

    Z = (X[:, keep] - center[keep]) / scale[keep]
    design = np.column_stack([np.ones(n), Z])
    coef = np.zeros(p + 1)
    lam = 0.0
    if not keep.any():
        # intercept-only model has a closed form
        frac = y.mean()
        beta = np.array([np.log(frac) - np.log1p(-frac)])
        converged, iters = True, 0
        history = [_objective(design, y, beta, np.zeros(1))]
    else:
        beta, converged, iters, history = _irls(design, y, 0.0, stop_on_separation=True)
        if not converged:
            lam = RIDGE_START
            while True:
                beta, converged, iters, history = _irls(design, y, lam, stop_on_separation=False)
                if converged:
                    break
                if lam >= RIDGE_MAX:
                    raise PropensityError("selection model did not converge with ridge penalty "
                                          f"up to {RIDGE_MAX}", last_iterate=beta)
                lam = min(2 * lam, RIDGE_MAX)
    coef[0] = beta[0]
    coef[1:][keep] = beta[1:]
    fit = PropensityFit(names=names, coefficients=coef, center=center, scale=scale,
                        converged=converged, iterations=iters, deviance=float(history[-1]),
                        deviance_history=tuple(float(d) for d in history), ridge_lambda=lam,
                        dropped=dropped, ids=tuple(ids))
    if not keep.any():
        scores = np.full(n, y.mean())
    else:
        scores = fit.predict(X)
    object.__setattr__(fit, "scores", scores)
    return fit


def fit_propensity(frame: UnitFrame) -> PropensityFit:
    """Fit the selection model on every unit of ``frame`` and score them all.

    The response is sample membership (sample = 1). Continuous covariates are
    standardized to mean 0, sd 1 over the frame; constant covariates are
    dropped with a warning. If the unpenalized fit diverges (any standardized
    slope beyond 15 in absolute value) or fails to converge, the fit is
    repeated with a ridge penalty on the slopes, starting at 1e-4 and
    doubling up to 0.1.
    """
    return fit_selection(frame.covariates, frame.in_sample, frame.schema.continuous,
                         names=frame.schema.names, ids=frame.ids)
