"""PATE estimators over a (possibly redefined) population of inference.

All estimators target the mean of y(1) - y(0) over the retained
population-only units of a :class:`~genpop.subpopulation.Subpopulation`.
Selection scores used for weighting are refit on the study sample plus the
retained population unless ``refit=False``, in which case the scores of the
supplied fit are used as is.
"""

from __future__ import annotations

import numpy as np

from ..frame import UnitFrame
from ..propensity import PropensityFit
from ..subpopulation import Subpopulation
from .base import ESTIMATORS, CollinearityWarning, EstimationError, PateEstimate, Workspace, linear_fit
from .bart import BartConfig, BartPosterior, fit_effects
from .bootstrap import MIN_B, BootstrapError, check_seed, run_replicates, summarize
from .core import CORES, eblup_core, fay_herriot_reml, ipw_core, outcome_core, shrinkage_convex, tmle_core

DEFAULT_B = 1000

__all__ = [
    "ESTIMATORS", "DEFAULT_B", "PateEstimate", "BartConfig", "BartPosterior", "EstimationError",
    "BootstrapError", "CollinearityWarning", "Workspace", "estimate", "estimate_all",
    "estimate_ipw", "estimate_outcome_model", "estimate_tmle", "estimate_eblup", "estimate_bart",
    "bootstrap_se", "fit_effects", "fay_herriot_reml", "shrinkage_convex", "linear_fit",
    "ipw_core", "outcome_core", "tmle_core", "eblup_core",
]


def _outcome_name(frame: UnitFrame, outcome):
    if outcome is None:
        if len(frame.outcome_names) != 1:
            raise ValueError(f"frame has outcomes {list(frame.outcome_names)}; name one")
        return frame.outcome_names[0]
    if outcome not in frame.outcome_names:
        raise ValueError(f"unknown outcome {outcome!r}")
    return outcome


def _sample_outcome(frame, name, order):
    """Outcome of the sample units, in the workspace's row order."""
    return np.asarray(frame.outcome(name), dtype=float)[order]


def estimate_all(frame: UnitFrame, sub: Subpopulation, fit: PropensityFit | None = None,
                 outcomes=None, estimators=ESTIMATORS, seed: int = 0, B: int | None = DEFAULT_B,
                 refit: bool = True, bart_config: BartConfig | None = None) -> list[PateEstimate]:
    """Run several estimators on several outcomes for one subpopulation.

    Bootstrap replicates are shared across estimators and outcomes, so this is
    much cheaper than separate calls and gives identical numbers. BART reports
    its posterior standard deviation instead of a bootstrap SE.

    Parameters
    ----------
    B : int or None
        Bootstrap replicates; ``None`` or 0 skips the bootstrap and reports
        NaN standard errors and intervals.

    Returns
    -------
    list of PateEstimate
        Ordered by estimator, then outcome.
    """
    seed = check_seed(seed)
    names = list(frame.outcome_names) if outcomes is None else [_outcome_name(frame, o) for o in outcomes]
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator(s): {unknown}")
    if B and B < MIN_B:
        raise ValueError(f"bootstrap needs B >= {MIN_B}")
    ws = Workspace.from_frame(frame, sub, fit, refit)
    ys = {o: _sample_outcome(frame, o, ws.sample_order) for o in names}
    for o, y in ys.items():
        if not np.all(np.isfinite(y)):
            raise EstimationError(f"outcome {o!r} is missing for some sample units")

    points = {}
    for est in estimators:
        if est == "bart":
            continue
        for o in names:
            points[(est, o)] = CORES[est](ws, ys[o], True)
    boot = {}
    cores = {e: CORES[e] for e in estimators if e != "bart"}
    if B and cores:
        boot = run_replicates(ws, ys, cores, B, seed)

    results = []
    for est in estimators:
        for o in names:
            if est == "bart":
                results.append(_bart(ws, ys[o], o, sub, seed, bart_config or BartConfig()))
                continue
            value, info = points[(est, o)]
            diag = dict(info)
            diag.update(refit=refit, n_sample=int(ws.z.size), bootstrap_b=int(B or 0))
            if B:
                values, census = boot[(est, o)]
                se, ci, widened, failed = summarize(values, census, value, f"{est}/{o}")
                diag.update(bootstrap_failures=failed, failure_census=dict(census), ci_widened=widened)
            else:
                se, ci = float("nan"), (float("nan"), float("nan"))
            results.append(PateEstimate(est, o, float(value), se, ci, sub.label, sub.n0, seed, diag))
    return results


def _bart(ws, y, outcome, sub, seed, config):
    post = fit_effects(ws.xs, ws.z, y, ws.xp, config, seed)
    draws = post.effects.mean(axis=1)
    est = float(draws.mean())
    se = float(draws.std(ddof=1)) if draws.size > 1 else 0.0
    lo, hi = (float(v) for v in np.quantile(draws, [0.025, 0.975]))
    diag = {"posterior_draws": int(draws.size), "acceptance": post.acceptance,
            "idle_sweeps": post.idle_sweeps, "config": config.to_dict(), "n_sample": int(ws.z.size)}
    return PateEstimate("bart", outcome, est, se, (min(lo, est), max(hi, est)), sub.label, sub.n0,
                        seed, diag)


def estimate(estimator: str, frame, sub, fit=None, outcome=None, seed=0, B=DEFAULT_B,
             refit=True, bart_config=None) -> PateEstimate:
    """Single estimator, single outcome."""
    out = _outcome_name(frame, outcome)
    return estimate_all(frame, sub, fit, [out], [estimator], seed, B, refit, bart_config)[0]


def estimate_ipw(frame, sub, fit=None, outcome=None, seed=0, B=DEFAULT_B, refit=True) -> PateEstimate:
    """Odds-weighted (Hajek) IPW estimate of the PATE.

    Sample units get weight (1 - e)/e; weights are normalized within arm and
    the estimate is the weighted treated mean minus the weighted control mean.
    """
    return estimate("ipw", frame, sub, fit, outcome, seed, B, refit)


def estimate_outcome_model(frame, sub, fit=None, outcome=None, seed=0, B=DEFAULT_B,
                           refit=True) -> PateEstimate:
    """Per-arm linear regression, averaged over the retained population.

    ``fit`` only matters for the bootstrap when ``refit=False``; the point
    estimate does not use selection scores.
    """
    return estimate("outcome_model", frame, sub, fit, outcome, seed, B, refit)


def estimate_tmle(frame, sub, fit=None, outcome=None, seed=0, B=DEFAULT_B, refit=True) -> PateEstimate:
    """Outcome model with a linear fluctuation along H = (1 - e)/e per arm."""
    return estimate("tmle", frame, sub, fit, outcome, seed, B, refit)


def estimate_eblup(frame, sub, fit=None, outcome=None, seed=0, B=DEFAULT_B, refit=True) -> PateEstimate:
    """Fay-Herriot EBLUP over selection-score quintile strata.

    Diagnostics carry the per-stratum direct estimates, sampling variances,
    shrinkage factors, synthetic predictions and EBLUPs. ``fallback`` is set
    when fewer than two strata have both arms.
    """
    return estimate("eblup", frame, sub, fit, outcome, seed, B, refit)


def estimate_bart(frame, sub, outcome=None, config: BartConfig | None = None, seed=0) -> PateEstimate:
    """BART posterior mean of the PATE; SE is the posterior standard deviation."""
    return estimate("bart", frame, sub, None, outcome, seed, None, True, config)


def bootstrap_se(estimator: str, frame, sub, outcome=None, B: int = DEFAULT_B, seed: int = 0,
                 fit=None, refit=True):
    """Bootstrap standard error and 95% percentile interval.

    Returns
    -------
    se : float
    ci95 : tuple
    """
    if B is None or B < MIN_B:
        raise ValueError(f"bootstrap needs B >= {MIN_B}")
    if estimator == "bart":
        raise ValueError("BART reports a posterior standard deviation; use estimate_bart")
    est = estimate(estimator, frame, sub, fit, outcome, seed, B, refit)
    return est.se, est.ci95
