"""Sample-population similarity: B-index, score overlap, covariate balance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.integrate import trapezoid

from .frame import UnitFrame
from .propensity import PropensityFit
from .redefine import _aligned_scores
from .subpopulation import Subpopulation

GRID_POINTS = 512
LOW_GENERALIZABILITY = 0.50
_GRID = np.linspace(0.0, 1.0, GRID_POINTS)
_MIN_BANDWIDTH = _GRID[1] - _GRID[0]


def silverman_bandwidth(x) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5); raises if fewer than 2 distinct values."""
    x = np.asarray(x, dtype=float)
    if np.unique(x).size < 2:
        raise ValueError("bandwidth undefined: fewer than 2 distinct values")
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.size ** -0.2


def kde_on_grid(x, bandwidth: float, grid=_GRID) -> np.ndarray:
    """Gaussian KDE evaluated on ``grid`` and renormalized to integrate to 1 there."""
    x = np.asarray(x, dtype=float)
    h = max(float(bandwidth), _MIN_BANDWIDTH)
    dens = np.zeros_like(grid)
    for start in range(0, x.size, 4096):
        u = (grid[:, None] - x[None, start:start + 4096]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= x.size * h * np.sqrt(2 * np.pi)
    total = trapezoid(dens, grid)
    return dens / total if total > 0 else dens


def score_densities(sample_scores, pop_scores, bandwidths=None):
    """Grid and renormalized densities for both score lists.

    Returns ``(grid, f_sample, f_pop, (h_sample, h_pop))``.
    """
    s = np.asarray(sample_scores, dtype=float)
    p = np.asarray(pop_scores, dtype=float)
    if s.size == 0 or p.size == 0:
        raise ValueError("score lists must be nonempty")
    if bandwidths is None:
        bandwidths = (silverman_bandwidth(s), silverman_bandwidth(p))
    hs, hp = (max(float(h), _MIN_BANDWIDTH) for h in bandwidths)
    return _GRID, kde_on_grid(s, hs), kde_on_grid(p, hp), (hs, hp)


def b_index(sample_scores, pop_scores, bandwidths=None) -> float:
    """Bhattacharyya coefficient between the two score densities.

    Densities are Gaussian KDEs (Silverman bandwidth per list unless
    ``bandwidths`` is given) on 512 points over [0, 1], renormalized on that
    interval; the integral of sqrt(f_s * f_p) uses the trapezoid rule.
    """
    grid, fs, fp, _ = score_densities(sample_scores, pop_scores, bandwidths)
    return float(np.clip(trapezoid(np.sqrt(fs * fp), grid), 0.0, 1.0))


def overlap(sample_scores, pop_scores) -> float:
    """Share of population scores inside the sample's [min, max] range."""
    s = np.asarray(sample_scores, dtype=float)
    p = np.asarray(pop_scores, dtype=float)
    if s.size == 0:
        raise ValueError("sample scores must be nonempty")
    if p.size == 0:
        raise ValueError("population scores must be nonempty")
    return float(np.mean((p >= s.min()) & (p <= s.max())))


class Balance(NamedTuple):
    sample_mean: float
    population_mean: float
    pooled_sd: float
    smd: float
    degenerate: bool


def _var(x):
    return x.var(ddof=1) if x.size > 1 else 0.0


def balance_table(frame: UnitFrame, sub: Subpopulation, fit: PropensityFit | None = None) -> dict[str, Balance]:
    """Standardized mean differences, sample minus retained population.

    The pooled sd weights the two group variances equally. When ``fit`` is
    given the propensity score gets a row of its own.
    """
    s = frame.in_sample
    pop = sub.population_mask
    columns = {name: frame.covariates[:, j] for j, name in enumerate(frame.schema.names)}
    if fit is not None:
        columns["propensity_score"] = _aligned_scores(frame, fit)
    out = {}
    for name, col in columns.items():
        a, b = col[s], col[pop]
        ma, mb = float(a.mean()), float(b.mean())
        sd = float(np.sqrt((_var(a) + _var(b)) / 2.0))
        if sd > 0:
            out[name] = Balance(ma, mb, sd, (ma - mb) / sd, False)
        else:
            out[name] = Balance(ma, mb, sd, 0.0, True)
    return out


@dataclass(frozen=True)
class DiagnosticsReport:
    label: str
    method: str
    n0: int
    b_index: float
    overlap: float
    balance: dict = field(repr=False)
    bandwidths: tuple = (float("nan"), float("nan"))
    degenerate_bandwidth: bool = False

    @property
    def low_generalizability(self) -> bool:
        return self.b_index < LOW_GENERALIZABILITY

    def to_dict(self) -> dict:
        return {
            "subpopulation": self.label,
            "method": self.method,
            "n0": self.n0,
            "b_index": self.b_index,
            "overlap": self.overlap,
            "interpretation": "low generalizability" if self.low_generalizability else "adequate",
            "kde": {"bandwidth_sample": self.bandwidths[0], "bandwidth_population": self.bandwidths[1],
                    "grid_points": GRID_POINTS, "integration": "trapezoid",
                    "degenerate_bandwidth": self.degenerate_bandwidth},
            "balance": {k: b._asdict() for k, b in self.balance.items()},
        }


def diagnose(frame: UnitFrame, fit: PropensityFit, sub: Subpopulation) -> DiagnosticsReport:
    """B-index, overlap and balance for ``sub`` using the scores of ``fit``.

    A score list with fewer than two distinct values has no Silverman
    bandwidth; it then falls back to the grid spacing and the report is
    flagged ``degenerate_bandwidth``.
    """
    e = _aligned_scores(frame, fit)
    s, p = e[frame.in_sample], e[sub.population_mask]
    degenerate = False
    bws = []
    for x in (s, p):
        try:
            bws.append(silverman_bandwidth(x))
        except ValueError:
            bws.append(_MIN_BANDWIDTH)
            degenerate = True
    _, _, _, used = score_densities(s, p, bws)
    return DiagnosticsReport(
        label=sub.label, method=sub.method, n0=sub.n0,
        b_index=b_index(s, p, bws), overlap=overlap(s, p),
        balance=balance_table(frame, sub, fit), bandwidths=used,
        degenerate_bandwidth=degenerate,
    )
