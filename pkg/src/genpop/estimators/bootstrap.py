"""Nonparametric bootstrap over study-sample units.

Sample units are resampled with replacement within treatment arm while the
population frame stays fixed. Within an arm, units inside and outside the
subpopulation region are resampled separately so every replicate keeps the
same number of units that carry weight. Every model (selection model included) is refit
on each replicate. Replicate ``r`` draws from
``SeedSequence(seed, spawn_key=(r,))`` so results do not depend on the order
replicates run in.
"""

from __future__ import annotations

import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..propensity import PropensityError
from .base import EstimationError, Workspace

MAX_FAILURE_SHARE = 0.20
MIN_B = 50


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed."""

    def __init__(self, message, census):
        super().__init__(message)
        self.census = dict(census)


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must lie in [0, 2**64)")
    return seed


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))


def resample_index(z, rng, support=None) -> np.ndarray:
    """Indices of one resample within arm (and within region membership).

    Treated units come first; inside an arm, units inside the subpopulation
    region come before those outside it.
    """
    support = np.ones(len(z), bool) if support is None else support
    parts = []
    for arm in (1, 0):
        for inside in (True, False):
            idx = np.flatnonzero((z == arm) & (support == inside))
            if idx.size:
                parts.append(rng.choice(idx, size=idx.size, replace=True))
    return np.concatenate(parts)


def worker_count() -> int:
    raw = os.environ.get("GENPOP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


_RECOVERABLE = (EstimationError, PropensityError, np.linalg.LinAlgError, ValueError,
                FloatingPointError, ZeroDivisionError)


def run_replicates(ws: Workspace, outcomes: dict, cores: dict, B: int, seed: int):
    """Bootstrap every (estimator, outcome) cell on shared resamples.

    Parameters
    ----------
    outcomes : dict
        Outcome name -> outcome values of the sample units.
    cores : dict
        Estimator name -> core function ``(ws, y, warn) -> (estimate, info)``.

    Returns
    -------
    dict
        ``(estimator, outcome) -> (values, census)``; failed replicates are NaN
        in ``values`` and counted by reason in ``census``.
    """
    seed = check_seed(seed)
    cells = [(e, o) for e in cores for o in outcomes]

    def one(r):
        rng = replicate_rng(seed, r)
        idx = resample_index(ws.z, rng, ws.support)
        rws = ws.resample(idx)
        row = {}
        for est, out in cells:
            try:
                with np.errstate(all="ignore"):
                    val, _ = cores[est](rws, outcomes[out][idx], False)
                row[(est, out)] = (float(val) if np.isfinite(val) else np.nan,
                                   None if np.isfinite(val) else "non-finite estimate")
            except _RECOVERABLE as exc:
                row[(est, out)] = (np.nan, f"{type(exc).__name__}: {exc}")
        return row

    workers = worker_count()
    if workers > 1 and B > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(B)))
    else:
        rows = [one(r) for r in range(B)]

    result = {}
    for cell in cells:
        values = np.array([row[cell][0] for row in rows])
        census = Counter(row[cell][1] for row in rows if row[cell][1] is not None)
        result[cell] = (values, census)
    return result


def summarize(values, census, estimate, label="replicates"):
    """Standard error and percentile interval from replicate values.

    The interval is widened to contain ``estimate`` when needed; the returned
    flag says whether that happened.
    """
    B = values.size
    failed = int(np.isnan(values).sum())
    if failed > MAX_FAILURE_SHARE * B:
        raise BootstrapError(f"{label}: {failed} of {B} bootstrap replicates failed "
                             f"({dict(census)})", census)
    ok = values[~np.isnan(values)]
    se = float(ok.std(ddof=1)) if ok.size > 1 else 0.0
    if ok.size and np.ptp(ok) == 0:
        se = 0.0
    lo, hi = (float(v) for v in np.quantile(ok, [0.025, 0.975]))
    widened = not lo <= estimate <= hi
    return se, (min(lo, estimate), max(hi, estimate)), widened, failed
