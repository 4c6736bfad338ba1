"""Unit frames: schema, CSV ingestion, covariate summaries and policy filters.

A frame holds every unit of the target population together with the study
sample. Sample units carry a treatment flag and observed outcomes; the
remaining ("population-only") units carry covariates alone.

CSV layout::

    id,membership,treatment,outcome:ELA,outcome:Math,<covariate>,...
    s001,sample,1,20.1,17.3,...
    p001,population,,,,...
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .subpopulation import Subpopulation

SMALL_STUDY_FRACTION = 0.05


class FrameError(ValueError):
    """Invalid frame content or malformed input file."""


class GeneralizationWarning(UserWarning):
    """The frame does not look like a small-sample generalization setting."""


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "continuous"
    units: str = ""

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise FrameError("covariate name must be nonempty")
        if self.kind not in ("continuous", "binary"):
            raise FrameError(f"covariate {self.name!r}: kind must be 'continuous' or 'binary'")


@dataclass(frozen=True)
class CovariateSchema:
    specs: tuple[CovariateSpec, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        if not specs:
            raise FrameError("schema needs at least one covariate")
        lowered = [s.name.strip().lower() for s in specs]
        if len(set(lowered)) != len(lowered):
            raise FrameError("covariate names must be distinct")
        object.__setattr__(self, "specs", specs)

    def __len__(self):
        return len(self.specs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    @property
    def continuous(self) -> np.ndarray:
        """Boolean mask of continuous covariates."""
        return np.array([s.kind == "continuous" for s in self.specs], dtype=bool)

    def index(self, name: str) -> int:
        key = name.strip().lower()
        for i, s in enumerate(self.specs):
            if s.name.strip().lower() == key:
                return i
        raise FrameError(f"unknown covariate {name!r}")

    def to_dict(self) -> dict:
        return {"covariates": [{"name": s.name, "kind": s.kind, "units": s.units} for s in self.specs]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CovariateSchema":
        try:
            entries = data["covariates"]
        except (KeyError, TypeError):
            raise FrameError("schema must contain a 'covariates' list") from None
        return cls(tuple(CovariateSpec(e["name"], e.get("kind", "continuous"), e.get("units", ""))
                         for e in entries))


def indiana_schema() -> CovariateSchema:
    """The 14 school-level covariates used for the Indiana CRT selection model."""
    spec = CovariateSpec
    return CovariateSchema((
        spec("ela_pretest", "continuous", "test-score points, 2008-2009"),
        spec("math_pretest", "continuous", "test-score points, 2008-2009"),
        spec("attendance", "continuous", "percent"),
        spec("full_time_staff", "continuous", "count"),
        spec("enrollment", "continuous", "count of students"),
        spec("pupil_teacher_ratio", "continuous", "ratio"),
        spec("county_population", "continuous", "count"),
        spec("title1", "binary", "Title I status"),
        spec("schoolwide_title1", "binary", "schoolwide Title I status"),
        spec("prop_male", "continuous", "proportion in [0,1]"),
        spec("prop_white", "continuous", "proportion in [0,1]"),
        spec("prop_sped", "continuous", "proportion in [0,1]"),
        spec("prop_frpl", "continuous", "proportion in [0,1]"),
        spec("prop_lep", "continuous", "proportion in [0,1]"),
    ))


def load_schema(path) -> tuple[CovariateSchema, dict[str, str]]:
    """Read a schema JSON file.

    Returns the schema and the (possibly empty) mapping of named policy
    predicates stored under ``"policies"``.
    """
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    policies = data.get("policies", {}) if isinstance(data, Mapping) else {}
    if not isinstance(policies, Mapping):
        raise FrameError("'policies' must map names to predicate strings")
    return CovariateSchema.from_dict(data), {str(k): str(v) for k, v in policies.items()}


@dataclass(frozen=True)
class UnitRecord:
    id: str
    covariates: tuple[float, ...]
    membership: str  # "sample" or "population_only"
    treatment: int | None = None
    outcomes: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class UnitFrame:
    """Columnar, immutable table of units.

    ``treatment`` is 1 (treated), 0 (control) or -1 (population-only unit).
    ``outcomes`` maps outcome names to arrays that are NaN for population-only
    units. ``potential_outcomes`` is a hidden side table of ``(y0, y1)`` pairs
    available only for simulated frames.
    """

    schema: CovariateSchema
    ids: tuple
    covariates: np.ndarray
    in_sample: np.ndarray
    treatment: np.ndarray
    outcomes: Mapping[str, np.ndarray]
    potential_outcomes: Mapping[str, tuple] | None = field(default=None, repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        if len(set(ids)) != n:
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise FrameError(f"duplicate id {dup!r}")
        x = np.array(self.covariates, dtype=float).reshape(n, len(self.schema))
        if not np.isfinite(x).all():
            raise FrameError("covariates must be finite")
        binary = ~self.schema.continuous
        if binary.any() and not np.isin(x[:, binary], (0.0, 1.0)).all():
            raise FrameError("binary covariates must be 0 or 1")
        s = np.array(self.in_sample, dtype=bool).reshape(n)
        z = np.array(self.treatment, dtype=np.int8).reshape(n)
        if not np.isin(z[s], (0, 1)).all():
            raise FrameError("every sample unit needs treatment 0 or 1")
        if (z[~s] != -1).any():
            raise FrameError("population-only units cannot carry a treatment")
        outcomes = {}
        for name, col in self.outcomes.items():
            col = np.array(col, dtype=float).reshape(n)
            if not np.isfinite(col[s]).all():
                raise FrameError(f"outcome {name!r} missing for a sample unit")
            if not np.isnan(col[~s]).all():
                raise FrameError(f"outcome {name!r} present on a population-only unit")
            col.setflags(write=False)
            outcomes[name] = col
        for arr in (x, s, z):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "in_sample", s)
        object.__setattr__(self, "treatment", z)
        object.__setattr__(self, "outcomes", outcomes)
        if n and s.sum() >= (~s).sum():
            warnings.warn("sample is not smaller than the population-only frame", GeneralizationWarning,
                          stacklevel=3)

    # -- sizes ---------------------------------------------------------------
    def __len__(self):
        return len(self.ids)

    @property
    def n_sample(self) -> int:
        return int(self.in_sample.sum())

    @property
    def n_population(self) -> int:
        """Population-only unit count."""
        return int((~self.in_sample).sum())

    @property
    def sample_fraction(self) -> float:
        return self.n_sample / len(self.ids)

    @property
    def is_small_study(self) -> bool:
        return self.sample_fraction < SMALL_STUDY_FRACTION

    @property
    def outcome_names(self) -> tuple[str, ...]:
        return tuple(self.outcomes)

    # -- access --------------------------------------------------------------
    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.schema.index(name)]

    def outcome(self, name: str) -> np.ndarray:
        for key, col in self.outcomes.items():
            if key == name or key.lower() == name.strip().lower():
                return col
        raise FrameError(f"unknown outcome {name!r}")

    def records(self) -> Iterator[UnitRecord]:
        for i, uid in enumerate(self.ids):
            sample = bool(self.in_sample[i])
            yield UnitRecord(
                id=uid,
                covariates=tuple(float(v) for v in self.covariates[i]),
                membership="sample" if sample else "population_only",
                treatment=int(self.treatment[i]) if sample else None,
                outcomes={k: float(v[i]) for k, v in self.outcomes.items()} if sample else {},
            )

    def check_estimable(self):
        """Raise unless the sample has both treatment arms."""
        z = self.treatment[self.in_sample]
        if self.n_sample < 2 or not ((z == 1).any() and (z == 0).any()):
            raise FrameError("estimation needs at least one treated and one control sample unit")

    def restrict(self, mask) -> "UnitFrame":
        """Frame containing only the rows in ``mask`` (a Subpopulation or boolean array)."""
        if isinstance(mask, Subpopulation):
            mask = mask.mask
        mask = np.asarray(mask, dtype=bool)
        pot = None
        if self.potential_outcomes is not None:
            pot = {k: (y0[mask], y1[mask]) for k, (y0, y1) in self.potential_outcomes.items()}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GeneralizationWarning)
            return UnitFrame(self.schema, tuple(np.asarray(self.ids, dtype=object)[mask]),
                             self.covariates[mask], self.in_sample[mask], self.treatment[mask],
                             {k: v[mask] for k, v in self.outcomes.items()}, pot)

    @classmethod
    def from_records(cls, schema: CovariateSchema, records: Iterable[UnitRecord]) -> "UnitFrame":
        records = list(records)
        names = []
        for r in records:
            for k in r.outcomes:
                if k not in names:
                    names.append(k)
        for r in records:
            if len(r.covariates) != len(schema):
                raise FrameError(f"unit {r.id!r}: expected {len(schema)} covariates")
            if r.membership not in ("sample", "population_only"):
                raise FrameError(f"unit {r.id!r}: bad membership {r.membership!r}")
            if r.membership == "sample" and set(r.outcomes) != set(names):
                raise FrameError(f"unit {r.id!r}: sample unit lacks an outcome")
            if r.membership == "population_only" and (r.outcomes or r.treatment is not None):
                raise FrameError(f"unit {r.id!r}: population-only unit carries treatment or outcomes")
        n = len(records)
        return cls(
            schema=schema,
            ids=tuple(r.id for r in records),
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(n, len(schema)),
            in_sample=np.array([r.membership == "sample" for r in records], dtype=bool),
            treatment=np.array([-1 if r.treatment is None else r.treatment for r in records]),
            outcomes={k: np.array([r.outcomes.get(k, np.nan) for r in records]) for k in names},
        )


# -- CSV ---------------------------------------------------------------------

def _norm(name: str) -> str:
    return name.strip().lower()


def _parse_number(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FrameError(f"row {row}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise FrameError(f"row {row}: non-finite value in column {column!r}")
    return value


def load_csv(path, schema: CovariateSchema) -> UnitFrame:
    """Read and validate a frame from a CSV file.

    Errors name the offending file row (the header is row 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise FrameError("no data rows")
    header = [_norm(h) for h in rows[0]]
    col = {h: j for j, h in enumerate(header)}
    for required in ("id", "membership", "treatment"):
        if required not in col:
            raise FrameError(f"missing column {required!r}")
    outcome_cols = [(rows[0][j].strip()[len("outcome:"):].strip(), j)
                    for j, h in enumerate(header) if h.startswith("outcome:")]
    if not outcome_cols:
        raise FrameError("missing outcome columns (named 'outcome:<name>')")
    cov_cols = []
    for spec in schema.specs:
        if _norm(spec.name) not in col:
            raise FrameError(f"missing column {spec.name!r}")
        cov_cols.append(col[_norm(spec.name)])
    binary = [s.kind == "binary" for s in schema.specs]

    ids, x, member, z = [], [], [], []
    y = {name: [] for name, _ in outcome_cols}
    seen = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) < len(header):
            raise FrameError(f"row {lineno}: expected {len(header)} cells, found {len(row)}")
        uid = row[col["id"]].strip()
        if not uid:
            raise FrameError(f"row {lineno}: empty id")
        if uid in seen:
            raise FrameError(f"row {lineno}: duplicate id {uid!r} (first seen on row {seen[uid]})")
        seen[uid] = lineno
        membership = _norm(row[col["membership"]])
        if membership not in ("sample", "population"):
            raise FrameError(f"row {lineno}: membership must be 'sample' or 'population'")
        sample = membership == "sample"
        values = []
        for spec, j, is_bin in zip(schema.specs, cov_cols, binary):
            v = _parse_number(row[j].strip(), lineno, spec.name)
            if is_bin and v not in (0.0, 1.0):
                raise FrameError(f"row {lineno}: binary covariate {spec.name!r} must be 0 or 1")
            values.append(v)
        treat = row[col["treatment"]].strip()
        if sample:
            if treat not in ("0", "1"):
                raise FrameError(f"row {lineno}: sample unit {uid!r} needs treatment 0 or 1")
            z.append(int(treat))
        else:
            if treat:
                raise FrameError(f"row {lineno}: treatment present on population row {uid!r}")
            z.append(-1)
        for name, j in outcome_cols:
            cell = row[j].strip()
            if sample:
                if not cell:
                    raise FrameError(f"row {lineno}: sample unit {uid!r} lacks outcome {name!r}")
                y[name].append(_parse_number(cell, lineno, "outcome:" + name))
            else:
                if cell:
                    raise FrameError(f"row {lineno}: outcome present on population row {uid!r}")
                y[name].append(np.nan)
        ids.append(uid)
        x.append(values)
        member.append(sample)
    return UnitFrame(schema, tuple(ids), np.array(x), np.array(member), np.array(z), y)


def merge_population(sample: UnitFrame, population: UnitFrame) -> UnitFrame:
    """Sample units of ``sample`` plus every unit of ``population`` as population-only.

    Treatment and outcomes of the second frame are discarded, so the same
    file can serve as both. Population ids that clash with sample ids get a
    ``pop:`` prefix.
    """
    if sample.schema.names != population.schema.names:
        raise FrameError("sample and population frames use different covariates")
    s = sample.in_sample
    if not s.any():
        raise FrameError("sample file has no sample rows")
    taken = set(np.asarray(sample.ids, dtype=object)[s])
    pids = tuple(f"pop:{i}" if i in taken else i for i in population.ids)
    n_s, n_p = int(s.sum()), len(population)
    ids = tuple(np.asarray(sample.ids, dtype=object)[s]) + pids
    x = np.vstack([sample.covariates[s], population.covariates])
    member = np.r_[np.ones(n_s, bool), np.zeros(n_p, bool)]
    z = np.r_[sample.treatment[s], np.full(n_p, -1)]
    y = {k: np.r_[v[s], np.full(n_p, np.nan)] for k, v in sample.outcomes.items()}
    return UnitFrame(sample.schema, ids, x, member, z, y)


def add_interactions(frame: UnitFrame, pairs) -> UnitFrame:
    """Frame with one extra continuous covariate ``a*b`` per pair ``(a, b)``.

    The product columns then enter every model built on the frame's
    covariates, the selection model included.
    """
    names = list(frame.schema.names)
    specs = list(frame.schema.specs)
    cols = [frame.covariates]
    for a, b in pairs:
        for nm in (a, b):
            if nm not in names[: len(frame.schema)]:
                raise FrameError(f"interaction: unknown covariate {nm!r}")
        label = f"{a}*{b}"
        if label in names:
            raise FrameError(f"interaction {label!r} given twice")
        names.append(label)
        specs.append(CovariateSpec(label, "continuous"))
        cols.append((frame.column(a) * frame.column(b))[:, None])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GeneralizationWarning)
        return UnitFrame(CovariateSchema(tuple(specs)), frame.ids, np.hstack(cols), frame.in_sample,
                         frame.treatment, dict(frame.outcomes), frame.potential_outcomes)


def write_csv(frame: UnitFrame, path) -> None:
    """Write ``frame`` in the layout accepted by :func:`load_csv`.

    Floats are written with ``repr`` so that reading the file back gives
    bit-identical values.
    """
    header = ["id", "membership", "treatment"]
    header += ["outcome:" + k for k in frame.outcomes] + list(frame.schema.names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, uid in enumerate(frame.ids):
            sample = bool(frame.in_sample[i])
            row = [uid, "sample" if sample else "population", str(int(frame.treatment[i])) if sample else ""]
            row += [repr(float(v[i])) if sample else "" for v in frame.outcomes.values()]
            row += [repr(float(v)) for v in frame.covariates[i]]
            w.writerow(row)


# -- summaries -----------------------------------------------------------------

def summarize(frame: UnitFrame) -> dict[str, tuple[float, float]]:
    """Covariate means for the sample and for the whole frame.

    The population mean runs over every unit, sample included, since the
    frame is treated as a census that contains the sample. Sums are exact
    (``math.fsum``) so the result does not depend on row order.
    """
    out = {}
    s = frame.in_sample
    for j, name in enumerate(frame.schema.names):
        col = frame.covariates[:, j]
        sample_mean = math.fsum(col[s]) / max(int(s.sum()), 1) if s.any() else float("nan")
        out[name] = (sample_mean, math.fsum(col) / len(col))
    return out


# -- policy predicates ---------------------------------------------------------

COMPARATORS = ("<", "<=", ">", ">=", "==", "in_quantile_range")


@dataclass(frozen=True)
class PolicyPredicate:
    """``covariate <comparator> threshold``.

    For ``in_quantile_range`` the threshold is a pair of quantile levels in
    [0, 1], evaluated against the population-only distribution of the frame.
    """

    covariate: str
    comparator: str
    threshold: float | tuple[float, float]

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise FrameError(f"unknown comparator {self.comparator!r}")
        if self.comparator == "in_quantile_range":
            lo, hi = (float(v) for v in self.threshold)
            if not (0.0 <= lo <= hi <= 1.0):
                raise FrameError("quantile bounds must satisfy 0 <= lo <= hi <= 1")
            object.__setattr__(self, "threshold", (lo, hi))
        else:
            object.__setattr__(self, "threshold", float(self.threshold))

    def evaluate(self, frame: UnitFrame) -> np.ndarray:
        """Boolean mask over all rows of ``frame``."""
        x = frame.column(self.covariate)
        c, t = self.comparator, self.threshold
        if c == "in_quantile_range":
            pop = x[~frame.in_sample]
            lo, hi = np.quantile(pop, t)
            return (x >= lo) & (x <= hi)
        return {"<": x < t, "<=": x <= t, ">": x > t, ">=": x >= t, "==": x == t}[c]

    def __str__(self):
        if self.comparator == "in_quantile_range":
            return f"{self.covariate}~q[{self.threshold[0]:g},{self.threshold[1]:g}]"
        return f"{self.covariate}{self.comparator}{self.threshold:g}"


_PRED = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(<=|>=|==|=|<|>)\s*([-+0-9.eE]+)\s*$")
_QPRED = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*~\s*q\s*\[\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\]\s*$")


def parse_predicates(text: str) -> list[PolicyPredicate]:
    """Parse ``"prop_frpl>0.75&urban==0"`` or ``"math_pretest~q[0,0.25]"``.

    Clauses joined by ``&`` form a conjunction.
    """
    preds = []
    for clause in text.split("&"):
        m = _QPRED.match(clause)
        if m:
            preds.append(PolicyPredicate(m.group(1), "in_quantile_range",
                                         (float(m.group(2)), float(m.group(3)))))
            continue
        m = _PRED.match(clause)
        if not m:
            raise FrameError(f"cannot parse predicate {clause.strip()!r}")
        op = "==" if m.group(2) == "=" else m.group(2)
        preds.append(PolicyPredicate(m.group(1), op, float(m.group(3))))
    return preds


def filter_policy(frame: UnitFrame, predicates: Sequence[PolicyPredicate] | str,
                  label: str | None = None) -> Subpopulation:
    """Retain population-only units satisfying every predicate.

    Sample units are always retained.
    """
    if isinstance(predicates, str):
        predicates = parse_predicates(predicates)
    region = np.ones(len(frame), bool)
    for p in predicates:
        frame.schema.index(p.covariate)
        region &= p.evaluate(frame)
    keep = region & ~frame.in_sample
    if not keep.any():
        raise FrameError("empty subpopulation")
    spec = "&".join(str(p) for p in predicates)
    return Subpopulation(
        method="policy",
        label=f"policy:{label or spec}",
        mask=keep | frame.in_sample,
        provenance={"predicates": spec},
        ids=frame.ids,
        in_sample=frame.in_sample,
        region=region,
    )
