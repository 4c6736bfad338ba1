"""Shared machinery for the PATE estimators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from ..frame import UnitFrame
from ..propensity import PropensityFit, fit_selection
from ..redefine import _aligned_scores
from ..subpopulation import Subpopulation

ESTIMATORS = ("ipw", "outcome_model", "tmle", "eblup", "bart")
RANK_TOL = 1e-9


class EstimationError(RuntimeError):
    """An estimator cannot produce a value on the given data."""


class CollinearityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PateEstimate:
    estimator: str
    outcome: str
    estimate: float
    se: float
    ci95: tuple
    subpopulation: str
    n0: int
    seed: int
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "outcome": self.outcome,
            "subpopulation": self.subpopulation,
            "n0": self.n0,
            "estimate": self.estimate,
            "se": self.se,
            "ci95": list(self.ci95),
            "seed": self.seed,
            "diagnostics": _clean(self.diagnostics),
        }

    def csv_row(self) -> list:
        """estimator, subpopulation, outcome, estimate, se."""
        return [self.estimator, self.subpopulation, self.outcome, self.estimate, self.se]


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class Workspace:
    """Arrays one estimator call works on.

    ``xs, z`` describe the study sample, ``xp`` the retained population-only
    units and ``support`` flags the sample units that satisfy the
    redefinition rule. Selection scores are refit lazily on the supported
    sample units plus ``xp`` unless given up front; sample units outside the
    support get score 1, hence zero odds weight.
    """

    def __init__(self, xs, z, xp, continuous=None, names=None, scores=None, support=None):
        self.xs = np.asarray(xs, dtype=float)
        self.z = np.asarray(z).astype(np.int64)
        self.xp = np.asarray(xp, dtype=float)
        self.support = (np.ones(self.z.size, bool) if support is None
                        else np.asarray(support, dtype=bool))
        self.continuous = continuous
        self.names = names
        self.fixed_scores = scores is not None
        if scores is not None:
            es = np.where(self.support, np.asarray(scores[0], float), 1.0)
            self.__dict__["scores"] = (es, np.asarray(scores[1], float))

    @cached_property
    def scores(self):
        """(sample scores, population scores) from a selection model fit on this workspace."""
        sup = self.support
        if not sup.any():
            raise EstimationError("no sample unit lies inside the subpopulation region")
        X = np.vstack([self.xs[sup], self.xp])
        k = int(sup.sum())
        member = np.r_[np.ones(k, bool), np.zeros(len(self.xp), bool)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_selection(X, member, self.continuous, names=self.names)
        es = np.ones(self.z.size)
        es[sup] = fit.scores[:k]
        return es, fit.scores[k:]

    def resample(self, idx):
        """Workspace on sample rows ``idx``; fixed scores follow their rows."""
        scores = None
        if self.fixed_scores:
            es, ep = self.scores
            scores = (es[idx], ep)
        return Workspace(self.xs[idx], self.z[idx], self.xp, self.continuous, self.names,
                         scores, self.support[idx])

    @classmethod
    def from_frame(cls, frame: UnitFrame, sub: Subpopulation, fit: PropensityFit | None = None,
                   refit: bool = True) -> "Workspace":
        if sub.ids != frame.ids:
            raise EstimationError("subpopulation was built on a different frame")
        frame.check_estimable()
        # rows sorted by id so results do not depend on the frame's row order
        ids = np.asarray(frame.ids, dtype=object)
        order = np.argsort(ids, kind="stable")
        s = order[frame.in_sample[order]]
        p = order[sub.population_mask[order]]
        support = sub.region[s]
        scores = None
        if not refit:
            if fit is None:
                raise EstimationError("refit=False needs a propensity fit")
            e = _aligned_scores(frame, fit)
            scores = (e[s], e[p])
        ws = cls(frame.covariates[s], frame.treatment[s], frame.covariates[p],
                 frame.schema.continuous, frame.schema.names, scores, support)
        ws.sample_order = s
        return ws


def linear_fit(x, y, warn=True):
    """OLS of ``y`` on an intercept plus ``x``; returns a predict function.

    Covariates that are constant or collinear (after centering) are dropped
    with a warning. Raises if covariates were given but none survive.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if n < 1:
        raise EstimationError("empty treatment arm")
    keep = np.zeros(p, bool)
    varying = np.ptp(x, axis=0) > 0 if n else keep
    if varying.any():
        # rank on unit-norm centered columns so the tolerance is scale free
        cols = np.flatnonzero(varying)
        xc = x[:, cols] - x[:, cols].mean(axis=0)
        xc /= np.linalg.norm(xc, axis=0)
        _, r, piv = linalg.qr(xc, mode="economic", pivoting=True)
        d = np.abs(np.diag(r))
        rank = int((d > RANK_TOL * d[0]).sum())
        keep[cols[piv[:rank]]] = True
    if p and not keep.any():
        raise EstimationError("outcome regression reduced to intercept only")
    if warn and p and not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} collinear covariate(s) from the outcome regression",
                      CollinearityWarning, stacklevel=3)
    design = np.column_stack([np.ones(n), x[:, keep]])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)

    def predict(xnew):
        xnew = np.asarray(xnew, dtype=float)
        return coef[0] + xnew[:, keep] @ coef[1:]

    predict.coef = coef
    predict.keep = keep
    return predict


def arm_predictions(ws: Workspace, y, warn=True):
    """Per-arm linear fits; predictions for sample and population units.

    Returns ``(q1_s, q0_s, q1_p, q0_p)``.
    """
    t = ws.z == 1
    c = ~t
    f1 = linear_fit(ws.xs[t], y[t], warn)
    f0 = linear_fit(ws.xs[c], y[c], warn)
    return f1(ws.xs), f0(ws.xs), f1(ws.xp), f0(ws.xp)


def check_arms(ws: Workspace):
    if not ((ws.z == 1).any() and (ws.z == 0).any()):
        raise EstimationError("need at least one treated and one control sample unit")
