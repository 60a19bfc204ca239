"""Command-line interface.

Three subcommands:

  analyze    compute the full DSM meta-analysis of a CSV of study summaries
  simulate   run a factorial simulation described by a flat config file
  summarize  reshape simulation results into plot-ready long-format tables

Exit codes: 0 on success, 1 for input errors, 2 when every requested
numerical method failed.
"""

import argparse
import csv
import json
import math
import os
import sys

from .effects import ArmSummary, StudyDsm, study_dsm, study_from_g
from .heterogeneity import HetApproximation, het_test
from .numerics import ConvergenceError
from .pooling import ci_hksj, ci_iv_normal, ci_ssw, pool_iv, pool_ssw
from .simulation import (
    ALPHA_GRID,
    ANALYSES,
    DELTA_C_VALUES,
    DELTA_VALUES,
    EQUAL_SIZES,
    FORMAT_VERSION,
    K_VALUES,
    TAU2_VALUES,
    UNEQUAL_PATTERNS,
    build_grid,
    results_to_rows,
    run_grid,
)
from .tau2 import INTERVAL_ESTIMATORS, POINT_ESTIMATORS

RAW_COLUMNS = ("study_id", "n_t", "mean_t", "sd_t", "n_c", "mean_c", "sd_c")
PRECOMPUTED_COLUMNS = ("study_id", "g_t", "n_t", "g_c", "n_c")

RESULT_COLUMNS = (
    "format_version", "regime", "K", "n", "f", "delta_C", "Delta", "tau2",
    "reps", "seed", "family", "method", "metric", "nominal",
    "value", "mc_se", "n_used", "failures",
)

SUMMARY_FACETS = {
    "level": ("het_test", "level"),
    "level_error": ("het_test", "level_rel_error"),
    "tau2_bias": ("tau2_point", "bias"),
    "tau2_coverage": ("tau2_interval", "coverage"),
    "delta_bias": ("delta_point", "bias"),
    "delta_coverage": ("delta_interval", "coverage"),
}

SUMMARY_COLUMNS = (
    "format_version", "facet", "delta_C", "Delta", "regime", "n", "K", "tau2",
    "method", "nominal", "value", "mc_se", "n_used", "failures",
)


class InputError(Exception):
    """User input is malformed; message carries row/column context."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, columns, rows):
    def emit(handle):
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])

    if path == "-":
        emit(sys.stdout)
    else:
        with open(path, "w", newline="") as handle:
            emit(handle)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _parse_number(text: str, row: int, column: str, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise InputError(f"row {row}, column '{column}': cannot parse {text!r} as a number") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise InputError(f"row {row}, column '{column}': value must be finite, got {text!r}")
    return value


def read_study_file(path: str) -> list[tuple[str, StudyDsm]]:
    """Read study summaries from CSV in either the raw or precomputed schema."""
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if header == list(RAW_COLUMNS):
            raw = True
        elif header == list(PRECOMPUTED_COLUMNS):
            raw = False
        else:
            raise InputError(
                f"unrecognized header {header}; expected {list(RAW_COLUMNS)} or {list(PRECOMPUTED_COLUMNS)}"
            )
        studies = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise InputError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            fields = dict(zip(header, (cell.strip() for cell in row)))
            sid = fields["study_id"]
            try:
                if raw:
                    treatment = ArmSummary(
                        n=_parse_number(fields["n_t"], row_no, "n_t", int),
                        mean=_parse_number(fields["mean_t"], row_no, "mean_t"),
                        sd=_parse_number(fields["sd_t"], row_no, "sd_t"),
                    )
                    control = ArmSummary(
                        n=_parse_number(fields["n_c"], row_no, "n_c", int),
                        mean=_parse_number(fields["mean_c"], row_no, "mean_c"),
                        sd=_parse_number(fields["sd_c"], row_no, "sd_c"),
                    )
                    studies.append((sid, study_dsm(treatment, control)))
                else:
                    studies.append(
                        (
                            sid,
                            study_from_g(
                                g_t=_parse_number(fields["g_t"], row_no, "g_t"),
                                n_t=_parse_number(fields["n_t"], row_no, "n_t", int),
                                g_c=_parse_number(fields["g_c"], row_no, "g_c"),
                                n_c=_parse_number(fields["n_c"], row_no, "n_c", int),
                            ),
                        )
                    )
            except ValueError as exc:
                raise InputError(f"row {row_no}: {exc}") from None
        if not studies:
            raise InputError(f"{path} contains no study rows")
        return studies


def analyze_studies(studies: list[StudyDsm], level: float = 0.95) -> dict:
    """Full analysis: heterogeneity tests, all tau^2 and overall-effect
    estimators. Per-method failures are recorded, not raised."""
    report = {
        "format_version": FORMAT_VERSION,
        "level": level,
        "heterogeneity": {},
        "tau2_point": {},
        "tau2_intervals": {},
        "delta_point": {},
        "delta_intervals": {},
        "failures": {},
    }

    def attempt(section, method, fn):
        try:
            report[section][method] = fn()
            return True
        except (ConvergenceError, ValueError) as exc:
            report["failures"].setdefault(section, {})[method] = str(exc)
            return False

    def describe_test(t):
        return {"statistic": t.statistic, "p_value": t.p_value}

    def describe_tau2(est):
        return {"value": est.value, "converged": est.converged, "truncated": est.truncated}

    def describe_tau2_interval(iv):
        return {"lo": iv.lo, "hi": iv.hi, "level": iv.level}

    def describe_point(est):
        return {"value": est.value, "se": est.se, "tau2_used": est.tau2_used}

    def describe_interval(iv):
        return {"center": iv.center, "lo": iv.lo, "hi": iv.hi, "level": iv.level}

    successes = 0
    for method, approx in (("ChiSq", HetApproximation.CHISQ), ("FSSW", HetApproximation.FSSW)):
        successes += attempt(
            "heterogeneity", method, lambda a=approx: describe_test(het_test(studies, a))
        )

    tau2_estimates = {}

    def tau2_point(method):
        est = POINT_ESTIMATORS[method](studies)
        tau2_estimates[method] = est
        return describe_tau2(est)

    for method in POINT_ESTIMATORS:
        successes += attempt("tau2_point", method, lambda m=method: tau2_point(m))
    for method, fn in INTERVAL_ESTIMATORS.items():
        successes += attempt(
            "tau2_intervals", method,
            lambda f=fn: describe_tau2_interval(f(studies, level=level)),
        )

    def iv_point(method):
        if method not in tau2_estimates:
            raise ConvergenceError(f"tau2 {method} estimate unavailable")
        return describe_point(pool_iv(studies, tau2_estimates[method]))

    successes += attempt("delta_point", "SSW", lambda: describe_point(pool_ssw(studies)))
    for method in ("DL", "REML", "MP"):
        successes += attempt("delta_point", f"IV-{method}", lambda m=method: iv_point(m))

    for method in ("DL", "REML", "MP"):
        successes += attempt(
            "delta_intervals", method,
            lambda m=method: describe_interval(ci_iv_normal(studies, tau2_method=m, level=level)),
        )
    successes += attempt("delta_intervals", "HKSJ", lambda: describe_interval(ci_hksj(studies, level=level)))
    for method in ("SMC", "SSC"):
        successes += attempt(
            "delta_intervals", method,
            lambda m=method: describe_interval(ci_ssw(studies, tau2_method=m, level=level)),
        )
    report["n_successful_methods"] = successes
    return report


def _study_rows(named_studies) -> list[dict]:
    rows = []
    for sid, s in named_studies:
        rows.append(
            {
                "study_id": sid,
                "n_t": s.n_t,
                "g_t": s.g_t,
                "n_c": s.n_c,
                "g_c": s.g_c,
                "d_hat": s.d_hat,
                "v2_hat": s.v2_hat,
                "n_tilde": s.n_tilde,
            }
        )
    return rows


def _render_report(report: dict) -> str:
    lines = []
    lines.append(f"Studies: {len(report['studies'])}   confidence level: {report['level']}")
    lines.append("")
    lines.append("Per-study effects")
    lines.append(f"{'id':>8} {'n_t':>5} {'n_c':>5} {'g_t':>10} {'g_c':>10} {'d_hat':>10} {'v2_hat':>10} {'n_tilde':>9}")
    for s in report["studies"]:
        lines.append(
            f"{s['study_id']:>8} {s['n_t']:>5} {s['n_c']:>5} {s['g_t']:>10.4f} {s['g_c']:>10.4f} "
            f"{s['d_hat']:>10.4f} {s['v2_hat']:>10.4f} {s['n_tilde']:>9.2f}"
        )
    lines.append("")
    lines.append("Heterogeneity tests")
    for method, entry in report["heterogeneity"].items():
        lines.append(f"  {method:<6} Q = {entry['statistic']:.4f}   p = {entry['p_value']:.4g}")
    lines.append("")
    lines.append("Between-studies variance (tau^2)")
    for method, entry in report["tau2_point"].items():
        note = " (truncated)" if entry["truncated"] else ""
        lines.append(f"  {method:<5} {entry['value']:.6f}{note}")
    for method, entry in report["tau2_intervals"].items():
        lines.append(f"  {method:<5} [{entry['lo']:.6f}, {entry['hi']:.6f}]")
    lines.append("")
    lines.append("Overall effect")
    for method, entry in report["delta_point"].items():
        lines.append(f"  {method:<8} {entry['value']:.6f}  (se {entry['se']:.6f})")
    for method, entry in report["delta_intervals"].items():
        lines.append(f"  {method:<8} [{entry['lo']:.6f}, {entry['hi']:.6f}]  center {entry['center']:.6f}")
    if report["failures"]:
        lines.append("")
        lines.append("Failed methods")
        for section, failures in report["failures"].items():
            for method, message in failures.items():
                lines.append(f"  {section}/{method}: {message}")
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    named = read_study_file(args.input)
    if not 0.0 < args.level < 1.0:
        raise InputError(f"--level must be in (0, 1), got {args.level}")
    report = analyze_studies([s for _, s in named], level=args.level)
    report["studies"] = _study_rows(named)
    print(_render_report(report))
    if args.json:
        payload = json.dumps(report, indent=2, sort_keys=True)
        if args.json == "-":
            print(payload)
        else:
            with open(args.json, "w") as handle:
                handle.write(payload + "\n")
    if report["n_successful_methods"] == 0:
        print("error: every requested method failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def parse_config(path: str) -> dict:
    """Flat key = value config; list values are comma-separated, '#' comments."""
    options = {}
    try:
        handle = open(path)
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from None
    with handle:
        for line_no, line in enumerate(handle, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise InputError(f"{path}:{line_no}: expected 'key = value', got {line.strip()!r}")
            key, _, value = body.partition("=")
            key = key.strip()
            if key in options:
                raise InputError(f"{path}:{line_no}: duplicate key {key!r}")
            options[key] = [item.strip() for item in value.split(",") if item.strip()]
    return options


def _config_numbers(options, key, kind, default):
    if key not in options:
        return list(default)
    try:
        return [kind(v) for v in options[key]]
    except ValueError:
        raise InputError(f"config key '{key}': cannot parse {options[key]} as {kind.__name__}s") from None


def _config_scalar(options, key, kind, default):
    if key not in options:
        return default
    if len(options[key]) != 1:
        raise InputError(f"config key '{key}' takes a single value, got {options[key]}")
    try:
        return kind(options[key][0])
    except ValueError:
        raise InputError(f"config key '{key}': cannot parse {options[key][0]!r} as {kind.__name__}") from None


KNOWN_CONFIG_KEYS = {"regime", "K", "n", "delta_C", "Delta", "tau2", "reps", "seed", "level", "analyses"}


def build_cells_from_config(options: dict, reps=None, seed=None):
    """Construct the simulation design selected by a parsed config.

    Omitted keys default to the full factorial sets; invalid values are
    rejected with the valid sets echoed.
    """
    unknown = set(options) - KNOWN_CONFIG_KEYS
    if unknown:
        raise InputError(f"unknown config keys {sorted(unknown)}; valid keys: {sorted(KNOWN_CONFIG_KEYS)}")
    regime = _config_scalar(options, "regime", str, "equal")
    if regime not in ("equal", "unequal"):
        raise InputError(f"regime must be 'equal' or 'unequal', got {regime!r}")
    ks = _config_numbers(options, "K", int, K_VALUES)
    default_ns = EQUAL_SIZES if regime == "equal" else tuple(sorted(UNEQUAL_PATTERNS))
    ns = _config_numbers(options, "n", int, default_ns)
    delta_cs = _config_numbers(options, "delta_C", float, DELTA_C_VALUES)
    deltas = _config_numbers(options, "Delta", float, DELTA_VALUES)
    tau2s = _config_numbers(options, "tau2", float, TAU2_VALUES)
    if reps is None:
        reps = _config_scalar(options, "reps", int, 2000)
    if seed is None:
        seed = _config_scalar(options, "seed", int, 0)
    level = _config_scalar(options, "level", float, 0.95)

    for k in ks:
        if k < 2:
            raise InputError(f"K must be at least 2, got {k}; designs here use K in {K_VALUES}")
        if regime == "unequal" and k % 5 != 0:
            raise InputError(f"unequal designs need K to be a multiple of 5, got {k}; designs here use K in {K_VALUES}")
    for n in ns:
        if regime == "unequal" and n not in UNEQUAL_PATTERNS:
            raise InputError(
                f"unequal mean size must be one of {sorted(UNEQUAL_PATTERNS)}, got {n}"
            )
        if regime == "equal" and n < 8:
            raise InputError(f"equal study size must be at least 8 (4 per arm), got {n}; designs here use n in {EQUAL_SIZES}")
    for t2 in tau2s:
        if t2 < 0:
            raise InputError(f"tau2 must be nonnegative, got {t2}; designs here use tau2 in {TAU2_VALUES}")
    if reps < 100:
        raise InputError(f"reps must be at least 100, got {reps}")
    if seed < 0:
        raise InputError(f"seed must be nonnegative, got {seed}")
    if not 0.0 < level < 1.0:
        raise InputError(f"level must be in (0, 1), got {level}")

    analyses = ANALYSES
    if "analyses" in options:
        requested = frozenset(options["analyses"])
        unknown = requested - ANALYSES
        if unknown:
            raise InputError(f"unknown analyses {sorted(unknown)}; valid: {sorted(ANALYSES)}")
        analyses = requested

    cells = build_grid(
        regime=regime, Ks=ks, ns=ns, delta_Cs=delta_cs, Deltas=deltas,
        tau2s=tau2s, reps=reps, seed=seed,
    )
    return cells, analyses, level


def cmd_simulate(args) -> int:
    options = parse_config(args.config)
    cells, analyses, level = build_cells_from_config(options, reps=args.reps, seed=args.seed)
    workers = args.workers
    if workers is None:
        workers = int(os.environ.get("DSMETA_WORKERS", "1"))
    if workers < 1:
        raise InputError(f"--workers must be positive, got {workers}")
    results = run_grid(cells, workers=workers, analyses=analyses, ci_level=level)
    rows = results_to_rows(results)
    _write_csv(args.out, RESULT_COLUMNS, rows)
    if args.out != "-":
        print(f"{len(cells)} cells, {len(rows)} metric rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def cmd_summarize(args) -> int:
    if args.facet not in SUMMARY_FACETS:
        raise InputError(f"unknown facet {args.facet!r}; valid facets: {sorted(SUMMARY_FACETS)}")
    family, metric = SUMMARY_FACETS[args.facet]
    try:
        handle = open(args.results, newline="")
    except OSError as exc:
        raise InputError(f"cannot open {args.results}: {exc}") from None
    with handle:
        reader = csv.DictReader(handle)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{args.results} lacks result columns {sorted(missing)}")
        selected = [row for row in reader if row["family"] == family and row["metric"] == metric]

    def sort_key(row):
        return (
            float(row["delta_C"]),
            float(row["Delta"]),
            row["regime"],
            float(row["n"]),
            int(row["K"]),
            row["method"],
            row["nominal"],
            float(row["tau2"]),
        )

    selected.sort(key=sort_key)
    out_rows = [
        {
            "format_version": row["format_version"],
            "facet": args.facet,
            "delta_C": row["delta_C"],
            "Delta": row["Delta"],
            "regime": row["regime"],
            "n": row["n"],
            "K": row["K"],
            "tau2": row["tau2"],
            "method": row["method"],
            "nominal": row["nominal"],
            "value": row["value"],
            "mc_se": row["mc_se"],
            "n_used": row["n_used"],
            "failures": row["failures"],
        }
        for row in selected
    ]
    _write_csv(args.out, SUMMARY_COLUMNS, out_rows)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsmeta",
        description="Meta-analysis of the difference of standardized means.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="analyze a CSV of study summaries")
    p_analyze.add_argument("input", help="CSV file (raw arm summaries or precomputed g values)")
    p_analyze.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p_analyze.add_argument("--json", help="write the JSON report to this path ('-' for stdout)")
    p_analyze.set_defaults(func=cmd_analyze)

    p_sim = sub.add_parser("simulate", help="run a simulation grid from a config file")
    p_sim.add_argument("config", help="flat key = value config file")
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_sim.add_argument("--reps", type=int, default=None, help="override the config replication count")
    p_sim.add_argument("--workers", type=int, default=None,
                       help="worker processes (default $DSMETA_WORKERS or 1)")
    p_sim.add_argument("--out", default="simulation_results.csv", help="output CSV path ('-' for stdout)")
    p_sim.set_defaults(func=cmd_simulate)

    p_sum = sub.add_parser("summarize", help="reshape simulation results for plotting")
    p_sum.add_argument("results", help="CSV produced by 'dsmeta simulate'")
    p_sum.add_argument("--facet", required=True,
                       help=f"metric family to extract: {', '.join(sorted(SUMMARY_FACETS))}")
    p_sum.add_argument("--out", default="-", help="output CSV path (default stdout)")
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
