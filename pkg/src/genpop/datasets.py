"""A synthetic, Indiana-like school frame bundled with the package.

The real trial microdata are not public, so this generator produces a frame
with the same shape: 54 volunteer schools randomized 27/27 and 1,460
non-participating schools described by the 14 school-level covariates of the
selection model plus two locale indicators. Participation favours whiter,
smaller, less urban schools, loosely matching the published covariate means.
Treatment effects on both outcomes grow with the share of students on free or
reduced-price lunch, so redefinitions change the estimand.

The bundled files were written by :func:`write_bundled` with the default seed.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit

from .frame import CovariateSchema, CovariateSpec, UnitFrame, indiana_schema, write_csv

DEFAULT_SEED = 1460
N_SAMPLE = 54
N_POPULATION = 1460

POLICIES = {
    "urban": "urban==1",
    "suburban": "suburban==1",
    "rural": "urban==0&suburban==0",
    "frpl": "prop_frpl>0.75",
    "low_math": "math_pretest~q[0,0.25]",
}


def bundled_schema() -> CovariateSchema:
    specs = indiana_schema().specs + (
        CovariateSpec("urban", "binary", "urban locale"),
        CovariateSpec("suburban", "binary", "suburban locale"),
    )
    return CovariateSchema(specs)


def _covariates(rng, n):
    locale = rng.choice(3, size=n, p=[0.28, 0.24, 0.48])  # urban, suburban, rural/town
    urban = (locale == 0).astype(float)
    suburban = (locale == 1).astype(float)
    enrollment = np.exp(rng.normal(6.0 + 0.25 * urban + 0.2 * suburban, 0.45, n))
    ratio = np.clip(rng.normal(17.2 + 0.8 * urban, 2.0, n), 9, 30)
    staff = np.maximum(enrollment / ratio + rng.normal(0, 2.0, n), 3.0)
    county = np.exp(rng.normal(np.choose(locale, [13.0, 11.9, 10.6]), 0.6, n))
    frpl = np.clip(rng.beta(3.6, 2.6, n) + 0.15 * urban - 0.05 * suburban, 0.02, 0.99)
    white = np.clip(rng.beta(8, 2, n) - 0.35 * urban - 0.05 * suburban, 0.01, 0.995)
    lep = np.clip(rng.gamma(1.2, 0.025, n) + 0.04 * urban, 0.0, 0.6)
    sped = np.clip(rng.normal(0.16, 0.04, n), 0.02, 0.5)
    male = np.clip(rng.normal(0.51, 0.025, n), 0.35, 0.65)
    ela = 18.8 - 6.0 * (frpl - 0.58) + rng.normal(0, 1.6, n)
    math_ = 16.4 - 5.0 * (frpl - 0.58) + 0.6 * (ela - 18.8) + rng.normal(0, 1.4, n)
    attendance = np.clip(96.4 + 0.4 * (ela - 18.8) / 1.6 + rng.normal(0, 0.7, n), 88, 99.9)
    title1 = (rng.random(n) < expit(1.2 + 5.0 * (frpl - 0.58))).astype(float)
    schoolwide = title1 * (rng.random(n) < expit(6.0 * (frpl - 0.58))).astype(float)
    return np.column_stack([ela, math_, attendance, staff, enrollment, ratio, county, title1,
                            schoolwide, male, white, sped, frpl, lep, urban, suburban])


def indiana_like(seed: int = DEFAULT_SEED) -> UnitFrame:
    """Generate the synthetic frame (54 sample + 1,460 population-only schools).

    Outcomes are ``ELA`` and ``Math`` post-test scores.
    """
    rng = np.random.default_rng(seed)
    n = N_SAMPLE + N_POPULATION
    x = _covariates(rng, n)
    white, county, staff, urban = x[:, 10], x[:, 6], x[:, 3], x[:, 14]
    lin = (2.0 * (white - 0.77) - 0.45 * (np.log(county) - 11.5) - 0.02 * (staff - 28) - 0.3 * urban)
    prob = expit(lin)
    chosen = rng.choice(n, size=N_SAMPLE, replace=False, p=prob / prob.sum())
    member = np.zeros(n, bool)
    member[chosen] = True
    z = np.full(n, -1)
    order = rng.permutation(chosen)
    z[order] = 0
    z[order[: N_SAMPLE // 2]] = 1
    frpl, ela, math_ = x[:, 12], x[:, 0], x[:, 1]
    tau_ela = 0.35 + 1.5 * (frpl - 0.58)
    tau_math = 0.7 + 2.0 * (frpl - 0.58) - 0.15 * (math_ - 16.4)
    y_ela = 2.0 + 0.95 * ela + rng.normal(0, 1.0, n) + np.where(z == 1, tau_ela, 0.0)
    y_math = 1.5 + 0.95 * math_ + rng.normal(0, 1.0, n) + np.where(z == 1, tau_math, 0.0)
    outcomes = {"ELA": np.where(member, np.round(y_ela, 3), np.nan),
                "Math": np.where(member, np.round(y_math, 3), np.nan)}
    x = _round(x)
    # sample units first, then population units, each with a readable id
    order = np.r_[np.flatnonzero(member), np.flatnonzero(~member)]
    ids = [f"s{i + 1:03d}" for i in range(N_SAMPLE)] + [f"p{i + 1:04d}" for i in range(N_POPULATION)]
    return UnitFrame(bundled_schema(), tuple(ids), x[order], member[order], z[order],
                     {k: v[order] for k, v in outcomes.items()})


def _round(x):
    x = x.copy()
    digits = [2, 2, 2, 1, 0, 2, 0, 0, 0, 3, 3, 3, 3, 3, 0, 0]
    for j, d in enumerate(digits):
        x[:, j] = np.round(x[:, j], d)
    return x


def write_bundled(directory, seed: int = DEFAULT_SEED) -> tuple[Path, Path]:
    """Write ``indiana_like.csv`` and ``indiana_like_schema.json`` to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = indiana_like(seed)
    data = directory / "indiana_like.csv"
    write_csv(frame, data)
    schema = directory / "indiana_like_schema.json"
    payload = frame.schema.to_dict()
    payload["policies"] = dict(POLICIES)
    schema.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return data, schema


def bundled_paths() -> tuple[Path, Path]:
    """Paths of the bundled data CSV and schema JSON."""
    base = resources.files("genpop") / "data"
    return Path(str(base / "indiana_like.csv")), Path(str(base / "indiana_like_schema.json"))
