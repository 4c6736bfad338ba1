"""Point-estimate cores working on a :class:`~genpop.estimators.base.Workspace`.

Each core maps ``(ws, y)`` to ``(estimate, diagnostics)``, where ``y`` holds
the observed outcome of the sample units. The cores are what the bootstrap
reruns on every replicate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logit

from .base import EstimationError, Workspace, arm_predictions, check_arms

N_STRATA = 5


def _odds(e):
    return (1.0 - e) / e


def ipw_core(ws: Workspace, y, warn=True):
    """Hajek-normalized odds-weighted difference in means.

    Sample units outside the subpopulation region carry zero weight.
    """
    check_arms(ws)
    es, _ = ws.scores
    w = _odds(es)
    t = ws.z == 1
    out = []
    ess = []
    for arm in (t, ~t):
        wa = w[arm]
        total = wa.sum()
        if not total > 0:
            raise EstimationError("an arm has zero total weight (no unit inside the subpopulation region?)")
        out.append((wa * y[arm]).sum() / total)
        ess.append(total * total / (wa * wa).sum())
    return float(out[0] - out[1]), {"ess_treated": float(ess[0]), "ess_control": float(ess[1])}


def outcome_core(ws: Workspace, y, warn=True):
    """Per-arm linear regressions averaged over the retained population."""
    check_arms(ws)
    _, _, q1p, q0p = arm_predictions(ws, y, warn)
    return float(np.mean(q1p - q0p)), {}


def tmle_core(ws: Workspace, y, warn=True):
    """Outcome regressions fluctuated along the odds clever covariate.

    The fluctuation regresses residuals on (H1, H0) without an intercept;
    the two columns have disjoint support so each epsilon is a one-variable
    least-squares slope.
    """
    check_arms(ws)
    es, ep = ws.scores
    q1s, q0s, q1p, q0p = arm_predictions(ws, y, warn)
    hs, hp = _odds(es), _odds(ep)
    t = ws.z == 1
    resid = y - np.where(t, q1s, q0s)
    eps = []
    for arm in (t, ~t):
        h = hs[arm]
        denom = (h * h).sum()
        if not denom > 0:
            raise EstimationError("degenerate fluctuation: clever covariate is zero in an arm")
        eps.append((h * resid[arm]).sum() / denom)
    e1, e0 = eps
    q1s_star = q1s + e1 * hs
    q0s_star = q0s + e0 * hs
    eq1 = float((hs[t] * (y[t] - q1s_star[t])).sum())
    eq0 = float((hs[~t] * (y[~t] - q0s_star[~t])).sum())
    est = np.mean((q1p + e1 * hp) - (q0p + e0 * hp))
    return float(est), {"epsilon_treated": float(e1), "epsilon_control": float(e0),
                        "equation_treated": eq1, "equation_control": eq0}


# -- EBLUP ------------------------------------------------------------------------

def fay_herriot_reml(theta, psi, X, tol=1e-10, max_iter=200):
    """REML estimate of the between-area variance in a Fay-Herriot model.

    theta_d = x_d' beta + u_d + e_d, u_d ~ N(0, A), e_d ~ N(0, psi_d) with
    psi known. Fisher scoring on A, truncated at zero.

    Returns
    -------
    A : float
        Between-area variance estimate (>= 0).
    beta : ndarray
        GLS coefficients at ``A``.
    converged : bool
    """
    theta = np.asarray(theta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    X = np.asarray(X, dtype=float)
    m, p = X.shape
    if m <= p:
        raise EstimationError("Fay-Herriot model needs more areas than coefficients")
    # a zero sampling variance makes V singular at A = 0
    floor = 1e-12 * (1.0 + theta.var())
    psi = np.maximum(psi, floor)
    A = max(float(theta.var(ddof=1) - psi.mean()), 0.0) if m > 1 else 0.0
    converged = False
    for _ in range(max_iter):
        P = reml_projection(A, psi, X)
        Py = P @ theta
        score = -0.5 * np.trace(P) + 0.5 * Py @ Py
        info = 0.5 * np.sum(P * P.T)
        new = max(A + score / info, 0.0)
        if abs(new - A) <= tol * (1.0 + A):
            A = new
            converged = True
            break
        A = new
    return A, gls_beta(A, psi, X, theta), converged


def reml_projection(A, psi, X):
    vinv = 1.0 / (A + psi)
    XtVX = (X * vinv[:, None]).T @ X
    VX = X * vinv[:, None]
    return np.diag(vinv) - VX @ np.linalg.solve(XtVX, VX.T)


def reml_loglik(A, theta, psi, X):
    """Restricted log-likelihood of the Fay-Herriot model, up to a constant."""
    v = A + np.asarray(psi, dtype=float)
    vinv = 1.0 / v
    XtVX = (X * vinv[:, None]).T @ X
    P = reml_projection(A, psi, X)
    return -0.5 * (np.log(v).sum() + np.linalg.slogdet(XtVX)[1] + theta @ P @ theta)


def gls_beta(A, psi, X, theta):
    vinv = 1.0 / (A + psi)
    XtVX = (X * vinv[:, None]).T @ X
    return np.linalg.solve(XtVX, (X * vinv[:, None]).T @ theta)


def _pooled_var(y, stratum, ok):
    """Within-stratum variance pooled over the strata in ``ok``."""
    ss, dof = 0.0, 0
    for d in np.flatnonzero(ok):
        yd = y[stratum == d]
        ss += ((yd - yd.mean()) ** 2).sum()
        dof += yd.size - 1
    if dof > 0:
        return ss / dof
    return y.var(ddof=1) if y.size > 1 else 0.0


def eblup_core(ws: Workspace, y, warn=True):
    """Shrink stratum difference-in-means toward a Fay-Herriot synthetic fit.

    Strata are quintiles of the retained population's selection scores.
    """
    check_arms(ws)
    es, ep = ws.scores
    cuts = np.quantile(ep, np.linspace(0, 1, N_STRATA + 1)[1:-1])
    sp = np.searchsorted(cuts, ep, side="left")
    ss = np.searchsorted(cuts, es, side="left")
    # sample units outside the subpopulation region belong to no stratum
    t = (ws.z == 1) & ws.support
    c = (ws.z == 0) & ws.support
    n1 = np.bincount(ss[t], minlength=N_STRATA)
    n0 = np.bincount(ss[c], minlength=N_STRATA)
    npop = np.bincount(sp, minlength=N_STRATA)
    share = npop / npop.sum()
    has = (n1 > 0) & (n0 > 0)

    direct = np.full(N_STRATA, np.nan)
    for d in np.flatnonzero(has):
        direct[d] = y[t & (ss == d)].mean() - y[c & (ss == d)].mean()
    v1 = _pooled_var(y[t], ss[t], n1 > 0)
    v0 = _pooled_var(y[c], ss[c], n0 > 0)
    psi = np.full(N_STRATA, np.nan)
    psi[has] = v1 / n1[has] + v0 / n0[has]

    lp = logit(ep)
    area_x = np.array([lp[sp == d].mean() if npop[d] else np.nan for d in range(N_STRATA)])
    info = {"strata": int(N_STRATA), "direct": direct, "psi": psi, "share": share,
            "n_treated": n1, "n_control": n0, "fallback": None}
    D = int(has.sum())
    if D < 2:
        if D == 1:
            value = float(direct[has][0])
            info["fallback"] = "single_direct"
        else:
            if not (t.any() and c.any()):
                t, c = ws.z == 1, ws.z == 0
            value = float(y[t].mean() - y[c].mean())
            info["fallback"] = "difference_in_means"
        synth = np.full(N_STRATA, value)
        info.update(synthetic=synth, gamma=np.where(has, 0.0, np.nan), eblup=synth,
                    sigma2_u=float("nan"))
        return value, info

    use_slope = D >= 4 and np.ptp(area_x[has]) > 0
    design = (np.column_stack([np.ones(N_STRATA), area_x]) if use_slope
              else np.ones((N_STRATA, 1)))
    A, beta, converged = fay_herriot_reml(direct[has], psi[has], design[has])
    synth = design @ beta
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(psi > 0, A / (A + psi), 1.0)
    gamma[~has] = np.nan
    eblup = np.where(has, gamma * direct + (1 - gamma) * synth, synth)
    live = npop > 0
    value = float(np.sum(share[live] * eblup[live]))
    info.update(synthetic=synth, gamma=gamma, eblup=eblup, sigma2_u=float(A),
                reml_converged=bool(converged), area_slope=bool(use_slope))
    return value, info


def shrinkage_convex(info, tol=1e-10) -> np.ndarray:
    """Per stratum with a direct estimate: does the EBLUP lie between direct and synthetic?"""
    has = ~np.isnan(np.asarray(info["direct"], dtype=float))
    d = np.asarray(info["direct"])[has]
    s = np.asarray(info["synthetic"])[has]
    e = np.asarray(info["eblup"])[has]
    lo, hi = np.minimum(d, s), np.maximum(d, s)
    scale = tol * (1.0 + np.abs(d) + np.abs(s))
    return (e >= lo - scale) & (e <= hi + scale)


CORES = {
    "ipw": ipw_core,
    "outcome_model": outcome_core,
    "tmle": tmle_core,
    "eblup": eblup_core,
}
