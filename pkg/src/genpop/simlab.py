"""Synthetic populations with known potential outcomes and a Monte Carlo harness.

Covariates are independent: the first ``continuous_count`` are Gaussian with
unit variance and configured means (named ``x1, x2, ...``), the rest are
Bernoulli with configured probabilities (``b1, b2, ...``). Potential
outcomes follow

    y(0) = c0 + beta' x + noise,   y(1) = y(0) + tau(x),

with tau(x) either a constant or tau0 + gamma' x; both share the same noise
draw. Units select into the sample independently with probability
expit(a + delta' x), the intercept ``a`` being calibrated by bisection so the
expected sample size matches the configuration. Selected units are then
randomized 1:1.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit

from .diagnostics import diagnose
from .estimators import ESTIMATORS, BartConfig, estimate_all, fit_effects, shrinkage_convex
from .estimators.base import _clean
from .frame import SMALL_STUDY_FRACTION, CovariateSchema, CovariateSpec, FrameError, UnitFrame, filter_policy
from .propensity import fit_propensity
from .redefine import build
from .subpopulation import Subpopulation

OUTCOME = "Y"
DEFAULT_METHODS = ("original", "crump", "minmax", "quantile", "covariates", "policy")


class SimConfigError(ValueError):
    """Invalid simulation configuration; the message starts with the field path."""


class OracleUnavailable(ValueError):
    pass


def _default_means():
    return [0.0] * 10 + [0.5, 0.3, 0.6, 0.4]


def _default_selection():
    return [0.0, 0.5, -0.4, 0.3] + [0.0] * 7 + [0.4, 0.0, 0.0, 0.0]


def _default_outcome():
    return [0.0, 0.5, 0.3, -0.3, 0.2] + [0.0] * 6 + [0.3, -0.2, 0.0, 0.0]


def _default_effect():
    return {"type": "linear", "tau0": 0.5, "gamma": [0.3] + [0.0] * 9 + [0.2, 0.0, 0.0, 0.0]}


@dataclass
class SimConfig:
    """Simulation settings.

    ``selection_coefficients`` and ``outcome_coefficients`` have an intercept
    first and then one entry per covariate. The selection intercept is
    replaced by the calibrated value. ``covariate_means`` gives Gaussian means
    for continuous covariates and success probabilities for binary ones.
    ``effect_model`` is ``{"type": "constant", "tau": t}`` or
    ``{"type": "linear", "tau0": t0, "gamma": [...]}``.
    """

    population_size: int = 2000
    sample_size: int = 60
    covariate_count: int = 14
    continuous_count: int = 10
    covariate_means: list = field(default_factory=_default_means)
    selection_coefficients: list = field(default_factory=_default_selection)
    outcome_coefficients: list = field(default_factory=_default_outcome)
    effect_model: dict = field(default_factory=_default_effect)
    noise_sd: float = 1.0
    replications: int = 500
    seed: int = 20240101
    enforce_small_study: bool = True
    estimators: list = field(default_factory=lambda: list(ESTIMATORS))
    methods: list = field(default_factory=lambda: list(DEFAULT_METHODS))
    quantile: float = 90.0
    policy: str = "x1>0"
    bootstrap_b: int = 0
    bart: dict = field(default_factory=lambda: {"trees": 50, "burn_in": 500, "draws": 1000})

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------------
    def validate(self):
        def fail(path, msg):
            raise SimConfigError(f"{path}: {msg}")

        def integer(path, v, lo=None):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                fail(path, f"expected an integer, got {type(v).__name__}")
            if lo is not None and v < lo:
                fail(path, f"must be >= {lo}")

        def number(path, v):
            if isinstance(v, bool) or not isinstance(v, (int, float, np.number)) or not math.isfinite(v):
                fail(path, f"expected a finite number, got {v!r}")

        def vector(path, v, n):
            if not isinstance(v, (list, tuple)):
                fail(path, "expected a list of numbers")
            if len(v) != n:
                fail(path, f"expected {n} entries, got {len(v)}")
            for i, x in enumerate(v):
                number(f"{path}[{i}]", x)

        integer("population_size", self.population_size, 2)
        integer("sample_size", self.sample_size, 4)
        integer("covariate_count", self.covariate_count, 1)
        integer("continuous_count", self.continuous_count, 0)
        integer("replications", self.replications, 1)
        integer("seed", self.seed, 0)
        if self.seed >= 2 ** 64:
            fail("seed", "must be below 2**64")
        integer("bootstrap_b", self.bootstrap_b, 0)
        if 0 < self.bootstrap_b < 50:
            fail("bootstrap_b", "must be 0 (off) or >= 50")
        if self.continuous_count > self.covariate_count:
            fail("continuous_count", "exceeds covariate_count")
        if self.sample_size >= self.population_size:
            fail("sample_size", "must be smaller than population_size")
        if self.enforce_small_study and self.sample_size >= SMALL_STUDY_FRACTION * self.population_size:
            fail("sample_size", f"must be below {SMALL_STUDY_FRACTION:g} x population_size "
                                "(set enforce_small_study to false to override)")
        if not isinstance(self.enforce_small_study, bool):
            fail("enforce_small_study", "expected true or false")
        p = self.covariate_count
        vector("covariate_means", self.covariate_means, p)
        for i in range(self.continuous_count, p):
            if not 0 <= self.covariate_means[i] <= 1:
                fail(f"covariate_means[{i}]", "binary covariate probability must lie in [0, 1]")
        vector("selection_coefficients", self.selection_coefficients, p + 1)
        vector("outcome_coefficients", self.outcome_coefficients, p + 1)
        number("noise_sd", self.noise_sd)
        if self.noise_sd < 0:
            fail("noise_sd", "must be >= 0")
        em = self.effect_model
        if not isinstance(em, dict) or em.get("type") not in ("constant", "linear"):
            fail("effect_model.type", "expected 'constant' or 'linear'")
        if em["type"] == "constant":
            number("effect_model.tau", em.get("tau"))
        else:
            number("effect_model.tau0", em.get("tau0"))
            vector("effect_model.gamma", em.get("gamma"), p)
        if not isinstance(self.estimators, (list, tuple)) or not self.estimators:
            fail("estimators", "expected a nonempty list")
        for i, e in enumerate(self.estimators):
            if e not in ESTIMATORS:
                fail(f"estimators[{i}]", f"unknown estimator {e!r}")
        if not isinstance(self.methods, (list, tuple)) or not self.methods:
            fail("methods", "expected a nonempty list")
        for i, m in enumerate(self.methods):
            if m not in DEFAULT_METHODS:
                fail(f"methods[{i}]", f"unknown method {m!r}; choose from {list(DEFAULT_METHODS)}")
        number("quantile", self.quantile)
        if not 50 <= self.quantile <= 99:
            fail("quantile", "must lie in [50, 99]")
        if not isinstance(self.policy, str) or not self.policy.strip():
            fail("policy", "expected a predicate string such as 'x1>0'")
        if not isinstance(self.bart, dict):
            fail("bart", "expected an object")
        for key, v in self.bart.items():
            if key not in ("trees", "burn_in", "draws"):
                fail(f"bart.{key}", "unknown field")
            integer(f"bart.{key}", v, 0 if key == "burn_in" else 1)

    # -- derived --------------------------------------------------------------------
    @property
    def names(self) -> tuple:
        c = self.continuous_count
        return tuple(f"x{j + 1}" for j in range(c)) + tuple(f"b{j + 1}" for j in range(self.covariate_count - c))

    @property
    def schema(self) -> CovariateSchema:
        c = self.continuous_count
        return CovariateSchema(tuple(
            CovariateSpec(nm, "continuous" if j < c else "binary", "")
            for j, nm in enumerate(self.names)))

    @property
    def bart_config(self) -> BartConfig:
        return BartConfig(**self.bart)

    def method_label(self, method: str) -> str:
        return f"quantile:{self.quantile:g}" if method == "quantile" else method

    def effect(self, x) -> np.ndarray:
        em = self.effect_model
        if em["type"] == "constant":
            return np.full(x.shape[0], float(em["tau"]))
        return float(em["tau0"]) + x @ np.asarray(em["gamma"], dtype=float)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    @classmethod
    def from_dict(cls, data) -> "SimConfig":
        if not isinstance(data, dict):
            raise SimConfigError("config: expected a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise SimConfigError(f"{key}: unknown field")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SimConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def restricted_region_config(**overrides) -> SimConfig:
    """Scenario whose sample comes from a narrow covariate region.

    Selection depends strongly on x1, x2, x3 and b1, so the sample sits in a
    corner of the population's covariate space.
    """
    sel = [0.0, 1.5, -1.0, 0.8] + [0.0] * 7 + [1.0, 0.0, 0.0, 0.0]
    base = dict(selection_coefficients=sel)
    base.update(overrides)
    return SimConfig(**base)


# -- data generation -----------------------------------------------------------------

def _rng(seed):
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def generate_population(config: SimConfig, seed) -> UnitFrame:
    """Population frame (no sample yet) with hidden potential outcomes under ``"Y"``."""
    rng = _rng(seed)
    N, p, c = config.population_size, config.covariate_count, config.continuous_count
    means = np.asarray(config.covariate_means, dtype=float)
    x = np.empty((N, p))
    x[:, :c] = rng.standard_normal((N, c)) + means[:c]
    x[:, c:] = (rng.random((N, p - c)) < means[c:]).astype(float)
    noise = config.noise_sd * rng.standard_normal(N)
    beta = np.asarray(config.outcome_coefficients, dtype=float)
    y0 = beta[0] + x @ beta[1:] + noise
    y1 = y0 + config.effect(x)
    ids = tuple(f"u{i:05d}" for i in range(N))
    return UnitFrame(config.schema, ids, x, np.zeros(N, bool), np.full(N, -1),
                     {OUTCOME: np.full(N, np.nan)}, {OUTCOME: (y0, y1)})


def calibrate_intercept(x, slopes, target: float) -> float:
    """Intercept a with sum(expit(a + x @ slopes)) == target, by bisection."""
    lin = x @ np.asarray(slopes, dtype=float)

    def excess(a):
        return expit(a + lin).sum() - target

    lo, hi = -50.0, 50.0
    if excess(lo) > 0 or excess(hi) < 0:
        raise SimConfigError("selection_coefficients: intercept calibration fails to bracket the "
                             "target sample size (coefficients too extreme)")
    return float(bisect(excess, lo, hi, xtol=1e-12, maxiter=500))


def selection_probabilities(population: UnitFrame, config: SimConfig) -> np.ndarray:
    coef = np.asarray(config.selection_coefficients, dtype=float)
    x = population.covariates
    a = calibrate_intercept(x, coef[1:], config.sample_size)
    return expit(a + x @ coef[1:])


def draw_sample(population: UnitFrame, config: SimConfig, seed) -> UnitFrame:
    """Select units into the study, randomize them 1:1 and reveal their outcome."""
    if population.potential_outcomes is None or OUTCOME not in population.potential_outcomes:
        raise OracleUnavailable("population frame lacks potential outcomes")
    if len(config.selection_coefficients) != population.covariates.shape[1] + 1:
        raise SimConfigError("selection_coefficients: length must be covariate_count + 1")
    rng = _rng(seed)
    prob = selection_probabilities(population, config)
    chosen = rng.random(prob.size) < prob
    idx = np.flatnonzero(chosen)
    if idx.size < 4:
        raise FrameError(f"only {idx.size} units selected; need at least 4")
    order = rng.permutation(idx)
    z = np.full(prob.size, -1)
    z[order] = 0
    z[order[: idx.size // 2]] = 1
    y0, y1 = population.potential_outcomes[OUTCOME]
    y = np.where(z == 1, y1, y0)
    y[~chosen] = np.nan
    return UnitFrame(population.schema, population.ids, population.covariates, chosen, z,
                     {OUTCOME: y}, population.potential_outcomes)


def true_pate(frame: UnitFrame, sub: Subpopulation | None = None, outcome: str = OUTCOME) -> float:
    """Mean of y(1) - y(0) over the retained population-only units."""
    if frame.potential_outcomes is None or outcome not in frame.potential_outcomes:
        raise OracleUnavailable("oracle unavailable: frame has no potential outcomes")
    y0, y1 = frame.potential_outcomes[outcome]
    mask = ~frame.in_sample if sub is None else sub.population_mask
    if not mask.any():
        raise OracleUnavailable("oracle unavailable: no retained population units")
    return float(np.mean(y1[mask] - y0[mask]))


# -- Monte Carlo ---------------------------------------------------------------------

def replication_seeds(master: int, r: int) -> tuple[int, int, int]:
    """(population, sample, estimator) seeds for replication ``r``."""
    state = np.random.SeedSequence(master, spawn_key=(r,)).generate_state(3, np.uint64)
    return tuple(int(s) for s in state)


def _build_sub(frame, fit, config, method):
    if method == "policy":
        return filter_policy(frame, config.policy, label=config.policy)
    return build(frame, fit, method, quantile=config.quantile)


def run_replication(config: SimConfig, r: int) -> dict:
    """One replication: generate, sample, fit, redefine, estimate, compare with the oracle."""
    s_pop, s_samp, s_est = replication_seeds(config.seed, r)
    record = {"replication": r, "seeds": [s_pop, s_samp, s_est], "methods": {}, "failures": []}
    try:
        pop = generate_population(config, s_pop)
        frame = draw_sample(pop, config, s_samp)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_propensity(frame)
    except (FrameError, ValueError, RuntimeError) as exc:
        record["failures"].append({"stage": "setup", "error": f"{type(exc).__name__}: {exc}"})
        return record
    record["n_sample"] = frame.n_sample

    ests = [e for e in config.estimators if e != "bart"]
    bart_draws = None
    if "bart" in config.estimators:
        pop_only = ~frame.in_sample
        s = frame.in_sample
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                post = fit_effects(frame.covariates[s], frame.treatment[s], frame.outcome(OUTCOME)[s],
                                   frame.covariates[pop_only], config.bart_config, s_est)
            bart_draws = (post.effects, pop_only)
        except (ValueError, RuntimeError) as exc:
            record["failures"].append({"stage": "bart", "error": f"{type(exc).__name__}: {exc}"})

    for method in config.methods:
        key = config.method_label(method)
        try:
            sub = _build_sub(frame, fit, config, method)
            diag = diagnose(frame, fit, sub)
        except (FrameError, ValueError) as exc:
            record["failures"].append({"stage": f"redefine:{key}", "error": f"{type(exc).__name__}: {exc}"})
            continue
        truth = true_pate(frame, sub)
        entry = {"label": sub.label, "n0": sub.n0, "true_pate": truth, "b_index": diag.b_index,
                 "overlap": diag.overlap, "estimates": {}}
        for est in _run_estimators(frame, sub, fit, ests, s_est, config, record, key):
            row = {"estimate": est.estimate, "se": est.se, "ci95": list(est.ci95),
                   "error": est.estimate - truth}
            if est.estimator == "eblup":
                convex = shrinkage_convex(est.diagnostics)
                row["convex_strata"] = int(convex.sum())
                row["direct_strata"] = int(convex.size)
                row["fallback"] = est.diagnostics.get("fallback")
            entry["estimates"][est.estimator] = row
        if bart_draws is not None:
            effects, pop_only = bart_draws
            cols = sub.population_mask[pop_only]
            draws = effects[:, cols].mean(axis=1)
            val = float(draws.mean())
            lo, hi = (float(v) for v in np.quantile(draws, [0.025, 0.975]))
            entry["estimates"]["bart"] = {"estimate": val, "se": float(draws.std(ddof=1)),
                                          "ci95": [min(lo, val), max(hi, val)], "error": val - truth}
        record["methods"][key] = entry
    return record


def _run_estimators(frame, sub, fit, ests, seed, config, record, key):
    if not ests:
        return []
    kw = dict(outcomes=[OUTCOME], seed=seed, B=config.bootstrap_b or None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            return estimate_all(frame, sub, fit, estimators=ests, **kw)
        except (ValueError, RuntimeError, np.linalg.LinAlgError):
            pass
        # isolate the failing estimator(s)
        out = []
        for e in ests:
            try:
                out.extend(estimate_all(frame, sub, fit, estimators=[e], **kw))
            except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                record["failures"].append({"stage": f"{e}:{key}", "error": f"{type(exc).__name__}: {exc}"})
        return out


@dataclass
class SimResult:
    """Aggregated Monte Carlo results.

    ``summary`` has one row per (estimator, method) with mean bias (outcome
    units and noise-sd units), empirical SE, mean reported SE, 95% interval
    coverage and mean N0. ``records`` keeps every replication for audit.
    """

    config: SimConfig
    summary: list
    methods: dict
    records: list
    failure_census: dict

    def row(self, estimator: str, method: str) -> dict:
        for r in self.summary:
            if r["estimator"] == estimator and r["method"] == method:
                return r
        raise KeyError((estimator, method))

    def values(self, method: str, field_name: str, estimator: str | None = None) -> np.ndarray:
        """Per-replication values (NaN where missing) of a method or estimate field."""
        out = []
        for rec in self.records:
            entry = rec["methods"].get(method)
            if entry is None:
                out.append(np.nan)
            elif estimator is None:
                out.append(entry[field_name])
            else:
                est = entry["estimates"].get(estimator)
                out.append(np.nan if est is None else est[field_name])
        return np.asarray(out, dtype=float)

    def to_dict(self) -> dict:
        return _clean({"config": self.config.to_dict(), "summary": self.summary, "methods": self.methods,
                       "failure_census": self.failure_census, "records": self.records})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    CSV_COLUMNS = ("estimator", "method", "mean_bias", "mean_bias_sd_units", "empirical_se",
                   "mean_reported_se", "coverage", "mean_n0", "replications_ok")

    def csv_rows(self) -> list:
        return [[r[c] for c in self.CSV_COLUMNS] for r in self.summary]


def _aggregate(config, records):
    methods = [config.method_label(m) for m in config.methods]
    scale = config.noise_sd if config.noise_sd > 0 else 1.0
    summary = []
    method_stats = {}
    census = Counter()
    for rec in records:
        for f in rec["failures"]:
            census[f["stage"]] += 1
    for m in methods:
        entries = [rec["methods"][m] for rec in records if m in rec["methods"]]
        n0 = np.array([e["n0"] for e in entries], dtype=float)
        b = np.array([e["b_index"] for e in entries], dtype=float)
        ov = np.array([e["overlap"] for e in entries], dtype=float)
        method_stats[m] = {
            "replications_ok": len(entries),
            "mean_n0": float(n0.mean()) if n0.size else float("nan"),
            "mean_b_index": float(b.mean()) if b.size else float("nan"),
            "mean_overlap": float(ov.mean()) if ov.size else float("nan"),
            "mean_true_pate": float(np.mean([e["true_pate"] for e in entries])) if entries else float("nan"),
        }
        for est in config.estimators:
            rows = [(e, e["estimates"][est]) for e in entries if est in e["estimates"]]
            if not rows:
                continue
            err = np.array([r["error"] for _, r in rows])
            val = np.array([r["estimate"] for _, r in rows])
            se = np.array([r["se"] for _, r in rows])
            lo = np.array([r["ci95"][0] for _, r in rows])
            hi = np.array([r["ci95"][1] for _, r in rows])
            truth = np.array([e["true_pate"] for e, _ in rows])
            has_ci = ~(np.isnan(lo) | np.isnan(hi))
            row = {
                "estimator": est,
                "method": m,
                "mean_bias": float(err.mean()),
                "mean_bias_sd_units": float(err.mean() / scale),
                "bias_mc_se": float(err.std(ddof=1) / np.sqrt(err.size)) if err.size > 1 else float("nan"),
                "empirical_se": float(val.std(ddof=1)) if val.size > 1 else float("nan"),
                "mean_reported_se": float(np.nanmean(se)) if np.isfinite(se).any() else float("nan"),
                "coverage": (float(np.mean(((lo <= truth) & (truth <= hi))[has_ci]))
                             if has_ci.any() else float("nan")),
                "mean_n0": float(np.mean([e["n0"] for e, _ in rows])),
                "replications_ok": len(rows),
            }
            if est == "eblup":
                row["convex_strata"] = int(sum(r.get("convex_strata", 0) for _, r in rows))
                row["direct_strata"] = int(sum(r.get("direct_strata", 0) for _, r in rows))
                row["fallbacks"] = int(sum(r.get("fallback") is not None for _, r in rows))
            summary.append(row)
    return summary, method_stats, dict(sorted(census.items()))


def run_study(config: SimConfig, progress=None) -> SimResult:
    """Run every replication and aggregate; deterministic given ``config.seed``.

    Failures inside a replication are recorded in its ``failures`` list and
    counted in the census; they never abort the study.
    """
    records = []
    for r in range(config.replications):
        records.append(run_replication(config, r))
        if progress is not None:
            progress(r + 1, config.replications)
    summary, methods, census = _aggregate(config, records)
    return SimResult(config, summary, methods, records, census)


def write_result(result: SimResult, out_dir, header_lines=()) -> tuple[Path, Path]:
    """Write ``simulation.json`` and ``simulation.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    json_path = out / "simulation.json"
    json_path.write_text(json.dumps({"header": list(header_lines), **payload}, indent=1, allow_nan=False)
                         + "\n", encoding="utf-8")
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SimResult.CSV_COLUMNS)
    for row in result.csv_rows():
        w.writerow([_fmt(v) for v in row])
    csv_path = out / "simulation.csv"
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    return json_path, csv_path


def _fmt(v):
    if isinstance(v, float):
        return "NA" if not math.isfinite(v) else format(v, ".6g")
    return v
