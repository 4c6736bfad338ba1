"""Command-line entry point: ``genpop analyze | simulate | diagnose``.

Exit codes are 0 on success, 1 when an analysis step fails (the message
names the stage) and 2 for usage or configuration errors. Every artifact
starts with a reproducibility header holding the tool version, the
invocation (minus ``--out``) and the master seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import shlex
import sys
import warnings
from pathlib import Path

from . import __version__
from .diagnostics import diagnose, score_densities
from .estimators import DEFAULT_B, ESTIMATORS, BartConfig, estimate_all
from .estimators.base import _clean
from .estimators.bootstrap import MIN_B, check_seed
from .frame import FrameError, add_interactions, load_csv, load_schema, merge_population, summarize
from .propensity import fit_propensity
from .redefine import _aligned_scores, build
from .simlab import SimConfig, SimConfigError, run_study, write_result
from .svg import density_svg

DEFAULT_SEED = 0
BASE_METHODS = ("original", "crump", "minmax", "covariates")
_METHOD_HEADS = ("original", "crump", "minmax", "quantile", "covariates", "policy")


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


class StageError(Exception):
    """An analysis step failed; exit code 1."""

    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.stage = stage


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, (UsageError, StageError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


# -- reproducibility header ---------------------------------------------------------

def _invocation(argv) -> str:
    kept, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        kept.append(a)
    return shlex.join(["genpop", *kept])


def _header(argv, seed) -> dict:
    return {"tool": "genpop", "version": __version__, "invocation": _invocation(argv), "seed": seed}


def _header_lines(header) -> list[str]:
    return [f"{header['tool']} {header['version']}",
            f"invocation: {header['invocation']}",
            f"seed: {header['seed']}"]


def _num(v):
    if isinstance(v, bool) or v is None:
        return "NA" if v is None else str(v).lower()
    if isinstance(v, float):
        return "NA" if v != v or v in (float("inf"), float("-inf")) else format(v, ".6g")
    return v


def _write_csv(path: Path, header_lines, columns, rows):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_num(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path: Path, payload):
    path.write_text(json.dumps(_clean(payload), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_") or "subpopulation"


# -- argument handling ---------------------------------------------------------------

def _seed(text):
    try:
        return check_seed(int(text))
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"seed must be an integer in [0, 2**64), got {text!r}") from None


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _split(text) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_policies(items) -> dict:
    out = {}
    for item in items or ():
        name, sep, expr = item.partition("=")
        if not sep or not name.strip() or not expr.strip():
            raise UsageError(f"--policy expects NAME=PREDICATES, got {item!r}")
        out[name.strip()] = expr.strip()
    return out


def _resolve_methods(text, policies) -> list[str]:
    """Expand ``all`` and ``policies`` and check each method's form."""
    methods = []
    for tok in _split(text):
        low = tok.lower()
        if low == "all":
            methods += list(BASE_METHODS) + [f"policy:{n}" for n in policies]
        elif low == "policies":
            methods += [f"policy:{n}" for n in policies]
        else:
            head, _, rest = tok.partition(":")
            if head.lower() not in _METHOD_HEADS:
                raise UsageError(f"unknown method {tok!r}; expected one of {', '.join(_METHOD_HEADS)}")
            if head.lower() == "policy":
                name, _, expr = rest.partition(":")
                if not name or (not expr and name not in policies):
                    raise UsageError(f"unknown policy in {tok!r}; define it with --policy NAME=PREDICATES")
            if head.lower() == "quantile" and rest:
                try:
                    float(rest)
                except ValueError:
                    raise UsageError(f"bad quantile in {tok!r}") from None
            methods.append(tok)
    if not methods:
        raise UsageError("--methods is empty")
    return list(dict.fromkeys(methods))


def _resolve_estimators(text) -> list[str]:
    toks = _split(text)
    if [t.lower() for t in toks] == ["all"]:
        return list(ESTIMATORS)
    bad = [t for t in toks if t not in ESTIMATORS]
    if bad or not toks:
        raise UsageError(f"unknown estimator(s) {bad}; expected 'all' or some of {', '.join(ESTIMATORS)}")
    return list(dict.fromkeys(toks))


def _load_inputs(args):
    for flag in ("data", "schema", "population"):
        path = getattr(args, flag, None)
        if path is not None and not Path(path).is_file():
            raise UsageError(f"--{flag}: no such file {path!r}")
    try:
        schema, policies = load_schema(args.schema)
    except (OSError, ValueError) as exc:
        raise UsageError(f"--schema: {exc}") from None
    policies = dict(policies)
    policies.update(_parse_policies(args.policy))
    with _Stage("load"), warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        frame = load_csv(args.data, schema)
        if args.population is not None:
            frame = merge_population(frame, load_csv(args.population, schema))
        frame.check_estimable()
    if args.interactions:
        try:
            frame = add_interactions(frame, _parse_interactions(args.interactions))
        except FrameError as exc:
            raise UsageError(f"--interactions: {exc}") from None
    return frame, policies, [str(w.message) for w in caught]


def _parse_interactions(text) -> list[tuple[str, str]]:
    pairs = []
    for tok in _split(text):
        a, sep, b = tok.partition(":")
        if not sep or not a.strip() or not b.strip():
            raise UsageError(f"--interactions expects A:B pairs, got {tok!r}")
        pairs.append((a.strip(), b.strip()))
    return pairs


def _quantile(v):
    try:
        q = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {v!r}") from None
    if not 50 <= q <= 99:
        raise argparse.ArgumentTypeError("quantile must lie in [50, 99]")
    return q


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="frame CSV (id, membership, treatment, outcome:*, covariates)")
    p.add_argument("--schema", required=True, help="covariate schema JSON, optionally with named policies")
    p.add_argument("--population", default=None,
                   help="second CSV whose rows all serve as population units")
    p.add_argument("--seed", type=_seed, default=DEFAULT_SEED, help="master seed (default %(default)s)")
    p.add_argument("--quantile", type=_quantile, default=90.0,
                   help="cut for the quantile method (default %(default)s)")
    p.add_argument("--policy", action="append", metavar="NAME=PREDICATES",
                   help="named policy predicate, e.g. 'rural=urban==0&suburban==0' (repeatable)")
    p.add_argument("--interactions", default=None, metavar="A:B,...",
                   help="product covariates added to the frame; off by default")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genpop", description="Generalize trial effects to redefined populations.")
    parser.add_argument("--version", action="version", version=f"genpop {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate PATEs on the original and redefined populations")
    _add_data_flags(a)
    a.add_argument("--methods", default="all",
                   help="comma list of original, crump, minmax, quantile[:q], covariates, policy:NAME; "
                        "'all' = original, crump, minmax, covariates and every named policy")
    a.add_argument("--estimators", default="all", help=f"comma list from {', '.join(ESTIMATORS)} or 'all'")
    a.add_argument("--outcomes", default="all", help="comma list of outcome names or 'all'")
    a.add_argument("--bootstrap-b", type=int, default=DEFAULT_B,
                   help=f"bootstrap replicates, 0 to skip (default %(default)s; minimum {MIN_B})")
    a.add_argument("--bart-trees", type=_positive, default=BartConfig.trees)
    a.add_argument("--bart-draws", type=_positive, default=BartConfig.draws)
    a.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a JSON config")
    s.add_argument("--config", required=True, help="SimConfig JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--quiet", action="store_true", help="no progress on stderr")

    d = sub.add_parser("diagnose", help="B-index, overlap and density plot for one subpopulation")
    _add_data_flags(d)
    d.add_argument("--method", default="original", help="one method, same forms as analyze --methods")
    d.add_argument("--out", default=None, help="output directory (optional)")
    return parser


# -- commands ------------------------------------------------------------------------

def _svg_for(frame, fit, sub, diag, header):
    e = _aligned_scores(frame, fit)
    grid, fs, fp, _ = score_densities(e[frame.in_sample], e[sub.population_mask], diag.bandwidths)
    return density_svg(grid, fs, fp, title=f"{sub.label}: N0 = {sub.n0}",
                       header_lines=_header_lines(header), b_index=diag.b_index)


def _frame_summary(frame) -> dict:
    means = summarize(frame)
    return {
        "n_sample": frame.n_sample,
        "n_population": frame.n_population,
        "sample_fraction": frame.sample_fraction,
        "small_study": frame.is_small_study,
        "outcomes": list(frame.outcome_names),
        "covariate_means": [{"covariate": k, "sample_mean": s, "population_mean": p}
                            for k, (s, p) in means.items()],
    }


def cmd_analyze(args, argv) -> dict:
    """Run the full pipeline and write the report files; returns the report."""
    if args.bootstrap_b and args.bootstrap_b < MIN_B:
        raise UsageError(f"--bootstrap-b must be 0 or at least {MIN_B}")
    if args.bootstrap_b < 0:
        raise UsageError("--bootstrap-b must be non-negative")
    estimators = _resolve_estimators(args.estimators)
    frame, policies, load_warnings = _load_inputs(args)
    methods = _resolve_methods(args.methods, policies)
    if args.outcomes.strip().lower() == "all":
        outcomes = list(frame.outcome_names)
    else:
        outcomes = _split(args.outcomes)
        bad = [o for o in outcomes if o not in frame.outcome_names]
        if bad or not outcomes:
            raise UsageError(f"unknown outcome(s) {bad}; data has {list(frame.outcome_names)}")
    bart = BartConfig(trees=args.bart_trees, draws=args.bart_draws)
    header = _header(argv, args.seed)

    with _Stage("propensity"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_propensity(frame)

    sections = []
    for method in methods:
        with _Stage(f"redefine:{method}"), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sub = build(frame, fit, method, policies=policies, quantile=args.quantile)
        with _Stage(f"diagnostics:{sub.label}"):
            diag = diagnose(frame, fit, sub)
        with _Stage(f"estimate:{sub.label}"), warnings.catch_warnings(record=True) as more:
            warnings.simplefilter("always")
            ests = estimate_all(frame, sub, fit, outcomes=outcomes, estimators=estimators,
                                seed=args.seed, B=args.bootstrap_b, bart_config=bart)
        notes = list(dict.fromkeys(str(w.message) for w in [*caught, *more]))
        for note in notes:
            print(f"warning [{sub.label}]: {note}", file=sys.stderr)
        sections.append((sub, diag, ests, notes))

    report = {
        "header": header,
        "settings": {"methods": methods, "estimators": estimators, "outcomes": outcomes,
                     "bootstrap_b": args.bootstrap_b, "quantile": args.quantile,
                     "policies": policies, "bart": bart.to_dict()},
        "frame": _frame_summary(frame),
        "warnings": load_warnings,
        "propensity": fit.to_dict(),
        "subpopulations": [
            {"label": sub.label, "method": sub.method, "n0": sub.n0, "provenance": sub.provenance,
             "diagnostics": diag.to_dict(), "estimates": [e.to_dict() for e in ests], "warnings": notes}
            for sub, diag, ests, notes in sections
        ],
    }

    with _Stage("write"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = _header_lines(header)
        _write_json(out / "report.json", report)
        _write_csv(out / "covariate_means.csv", lines, ["covariate", "sample_mean", "population_mean"],
                   [[r["covariate"], r["sample_mean"], r["population_mean"]]
                    for r in report["frame"]["covariate_means"]])
        _write_csv(out / "estimates.csv", lines,
                   ["subpopulation", "estimator", "outcome", "estimate", "se", "ci_low", "ci_high", "n0", "seed"],
                   [[e.subpopulation, e.estimator, e.outcome, e.estimate, e.se, e.ci95[0], e.ci95[1], e.n0, e.seed]
                    for _, _, ests, _ in sections for e in ests])
        _write_csv(out / "diagnostics.csv", lines,
                   ["subpopulation", "method", "n0", "b_index", "overlap", "interpretation",
                    "bandwidth_sample", "bandwidth_population"],
                   [[d.label, d.method, d.n0, d.b_index, d.overlap,
                     "low generalizability" if d.low_generalizability else "adequate", *d.bandwidths]
                    for _, d, _, _ in sections])
        _write_csv(out / "balance.csv", lines,
                   ["subpopulation", "covariate", "sample_mean", "population_mean", "pooled_sd", "smd"],
                   [[d.label, k, b.sample_mean, b.population_mean, b.pooled_sd, b.smd]
                    for _, d, _, _ in sections for k, b in d.balance.items()])
        for sub, diag, _, _ in sections:
            (out / f"density_{_slug(sub.label)}.svg").write_text(
                _svg_for(frame, fit, sub, diag, header), encoding="utf-8")
    for sub, diag, ests, _ in sections:
        print(f"{sub.label}: N0={sub.n0} B-index={diag.b_index:.3f} overlap={diag.overlap:.3f} "
              f"estimates={len(ests)}")
    print(f"wrote {out}")
    return report


def cmd_simulate(args, argv):
    """Run a Monte Carlo study and write ``simulation.json`` / ``simulation.csv``."""
    if not Path(args.config).is_file():
        raise UsageError(f"--config: no such file {args.config!r}")
    config = SimConfig.from_json(args.config)  # SimConfigError -> exit 2
    header = _header(argv, config.seed)

    def progress(done, total):
        if not args.quiet:
            print(f"\rreplication {done}/{total}", end="" if done < total else "\n", file=sys.stderr)

    with _Stage("simulate"):
        result = run_study(config, progress=progress)
    with _Stage("write"):
        json_path, csv_path = write_result(result, args.out, _header_lines(header))
    if result.failure_census:
        print(f"failures: {result.failure_census}", file=sys.stderr)
    print(f"wrote {json_path} and {csv_path}")
    return result


def cmd_diagnose(args, argv):
    """Diagnostics for one subpopulation; writes ``diagnostics.json`` and an SVG when ``--out`` is set."""
    frame, policies, load_warnings = _load_inputs(args)
    methods = _resolve_methods(args.method, policies)
    if len(methods) != 1:
        raise UsageError("--method takes exactly one method")
    header = _header(argv, args.seed)
    with _Stage("propensity"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_propensity(frame)
    with _Stage(f"redefine:{methods[0]}"):
        sub = build(frame, fit, methods[0], policies=policies, quantile=args.quantile)
    with _Stage(f"diagnostics:{sub.label}"):
        diag = diagnose(frame, fit, sub)
    if args.out is not None:
        with _Stage("write"):
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "diagnostics.json", {"header": header, "warnings": load_warnings,
                                                   "provenance": sub.provenance, **diag.to_dict()})
            (out / f"density_{_slug(sub.label)}.svg").write_text(
                _svg_for(frame, fit, sub, diag, header), encoding="utf-8")
    verdict = "low generalizability" if diag.low_generalizability else "adequate"
    print(f"{sub.label}: N0={sub.n0} B-index={diag.b_index:.6f} overlap={diag.overlap:.6f} ({verdict})")
    return diag


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, argv)
    except (UsageError, SimConfigError) as exc:
        print(f"genpop {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"genpop {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
