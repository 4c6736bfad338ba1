"""Formal rules for redefining the population of inference.

Every rule trims population-only units; the study sample is never discarded.
Interval boundaries are inclusive throughout.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .frame import FrameError, UnitFrame, filter_policy
from .propensity import PropensityFit
from .subpopulation import Subpopulation

CRUMP_FALLBACK = 0.1


def _aligned_scores(frame: UnitFrame, fit: PropensityFit) -> np.ndarray:
    if tuple(fit.ids) == frame.ids:
        return np.asarray(fit.scores, dtype=float)
    lookup = fit.score_map()
    try:
        return np.array([lookup[i] for i in frame.ids], dtype=float)
    except KeyError as exc:
        raise FrameError(f"propensity fit has no score for unit {exc.args[0]!r}") from None


def _make(frame, method, label, region, provenance):
    keep_pop = region & ~frame.in_sample
    if not keep_pop.any():
        raise FrameError(f"{label}: empty subpopulation")
    return Subpopulation(method=method, label=label, mask=keep_pop | frame.in_sample,
                         provenance=provenance, ids=frame.ids, in_sample=frame.in_sample,
                         region=region)


def original(frame: UnitFrame) -> Subpopulation:
    """The unmodified population."""
    return _make(frame, "original", "original", np.ones(len(frame), bool), {})


# -- Crump et al. optimal cutoff ----------------------------------------------

def solve_crump_alpha(scores) -> tuple[float, bool]:
    """Smallest alpha with 1/(a(1-a)) = 2 E[g(e) | a <= e <= 1-a], g(e) = 1/(e(1-e)).

    Returns ``(alpha, solved)``; ``solved`` is False when no root exists in
    (0, 0.5] and the conventional 0.1 is returned instead.

    Writing m = min(e, 1-e), a unit is retained iff m >= alpha. Sorting m
    ascending splits (0, 0.5] into pieces on which the retained set (and so
    the right-hand side) is constant; on each piece the equation is a
    quadratic in alpha whose smaller root is checked against the piece.
    """
    e = np.asarray(scores, dtype=float)
    if e.size == 0:
        raise ValueError("crump_alpha needs at least one score")
    if np.any((e <= 0) | (e >= 1)):
        raise ValueError("scores must lie strictly inside (0, 1)")
    m = np.sort(np.minimum(e, 1 - e))
    g = 1.0 / (m * (1 - m))
    # mean of g over units j..N-1 for each j
    tail_mean = np.cumsum(g[::-1])[::-1] / np.arange(len(g), 0, -1)
    rhs = 2.0 * tail_mean
    root = (2.0 / rhs) / (1.0 + np.sqrt(1.0 - 4.0 / rhs))
    lower = np.concatenate([[0.0], m[:-1]])
    ok = (root > lower) & (root <= m)
    if ok.any():
        return float(root[np.argmax(ok)]), True
    return CRUMP_FALLBACK, False


def crump_alpha(pop_scores) -> float:
    """Optimal trimming cutoff alpha in (0, 0.5]; see :func:`solve_crump_alpha`."""
    return solve_crump_alpha(pop_scores)[0]


def trim_crump(frame: UnitFrame, fit: PropensityFit, alpha: float | None = None) -> Subpopulation:
    """Keep population units with score in [alpha, 1 - alpha].

    ``alpha`` is solved from the population-only scores unless given.
    """
    e = _aligned_scores(frame, fit)
    pop = ~frame.in_sample
    if alpha is None:
        alpha, solved = solve_crump_alpha(e[pop])
        source = "solved" if solved else "fallback"
    else:
        alpha = float(alpha)
        if not 0 <= alpha <= 0.5:
            raise ValueError("alpha must lie in [0, 0.5]")
        source = "override"
    keep = (e >= alpha) & (e <= 1 - alpha)
    return _make(frame, "crump", "crump", keep, {"alpha": alpha, "alpha_source": source})


# -- propensity-score range rules ----------------------------------------------

def trim_minmax(frame: UnitFrame, fit: PropensityFit) -> Subpopulation:
    """Keep population units whose score lies within the sample's score range."""
    e = _aligned_scores(frame, fit)
    s = e[frame.in_sample]
    if s.size == 0:
        raise FrameError("minmax trimming needs a nonempty sample")
    lo, hi = float(s.min()), float(s.max())
    return _make(frame, "ps_minmax", "minmax", (e >= lo) & (e <= hi), {"lower": lo, "upper": hi})


def trim_quantile(frame: UnitFrame, fit: PropensityFit, q: float) -> Subpopulation:
    """Drop population units scoring above the q-th percentile of sample scores.

    ``q`` is a percentile in [50, 99]; the quantile interpolates linearly
    between order statistics.
    """
    q = float(q)
    if not 50 <= q <= 99:
        raise ValueError("quantile cut must lie in [50, 99]")
    e = _aligned_scores(frame, fit)
    cut = float(np.quantile(e[frame.in_sample], q / 100.0))
    return _make(frame, "ps_quantile", f"quantile:{q:g}", e <= cut, {"q": q, "cut": cut})


# -- covariate ranges ----------------------------------------------------------

def trim_covariates(frame: UnitFrame) -> Subpopulation:
    """Keep population units inside the sample's range on every covariate.

    Binary covariates constrain only when the sample shows a single level.
    """
    x = frame.covariates
    s = frame.in_sample
    keep = np.ones(len(frame), bool)
    bounds = {}
    for j, spec in enumerate(frame.schema.specs):
        col = x[:, j]
        lo, hi = float(col[s].min()), float(col[s].max())
        if spec.kind == "binary" and lo != hi:
            continue
        bounds[spec.name] = [lo, hi]
        keep &= (col >= lo) & (col <= hi)
    return _make(frame, "covariate_range", "covariates", keep, {"bounds": bounds})


# -- dispatch --------------------------------------------------------------------

def reproduce(frame: UnitFrame, fit: PropensityFit | None, sub: Subpopulation) -> Subpopulation:
    """Rebuild ``sub`` from its recorded provenance alone."""
    prov = sub.provenance
    if sub.method == "original":
        return original(frame)
    if sub.method == "policy":
        return filter_policy(frame, prov["predicates"], label=sub.label.split(":", 1)[1])
    if sub.method == "covariate_range":
        keep = np.ones(len(frame), bool)
        for name, (lo, hi) in prov["bounds"].items():
            col = frame.column(name)
            keep &= (col >= lo) & (col <= hi)
        return _make(frame, sub.method, sub.label, keep, prov)
    e = _aligned_scores(frame, fit)
    if sub.method == "crump":
        a = prov["alpha"]
        keep = (e >= a) & (e <= 1 - a)
    elif sub.method == "ps_minmax":
        keep = (e >= prov["lower"]) & (e <= prov["upper"])
    else:
        keep = e <= prov["cut"]
    return _make(frame, sub.method, sub.label, keep, prov)


def build(frame: UnitFrame, fit: PropensityFit, method: str,
          policies: Mapping[str, str] | None = None, quantile: float = 90) -> Subpopulation:
    """Construct a subpopulation from a method string.

    Accepted forms: ``original``, ``crump``, ``minmax``, ``quantile``,
    ``quantile:<q>``, ``covariates``, ``policy:<name>`` (looked up in
    ``policies``) and ``policy:<name>:<predicates>``.
    """
    head, _, rest = method.strip().partition(":")
    head = head.lower()
    if head == "original":
        return original(frame)
    if head == "crump":
        return trim_crump(frame, fit)
    if head == "minmax":
        return trim_minmax(frame, fit)
    if head == "quantile":
        return trim_quantile(frame, fit, float(rest) if rest else quantile)
    if head == "covariates":
        return trim_covariates(frame)
    if head == "policy":
        name, _, expr = rest.partition(":")
        if not name:
            raise ValueError("policy method needs a name: policy:<name>[:<predicates>]")
        if not expr:
            if not policies or name not in policies:
                raise ValueError(f"unknown policy {name!r}")
            expr = policies[name]
        return filter_policy(frame, expr, label=name)
    raise ValueError(f"unknown redefinition method {method!r}")
