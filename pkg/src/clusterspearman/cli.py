"""
Command-line interface.

``clusterspearman estimate`` analyses a CSV file; ``clusterspearman
simulate`` runs a Monte Carlo study.  Both write JSON and CSV reports plus
a ``manifest.json`` into ``--out``.  Exit codes: 0 success, 2 usage or
data error, 3 numerical failure.  Diagnostics go to stderr; stdout gets a
single summary line.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .analysis import CI_METHODS, analyze
from .dataset import load_csv, parse_levels
from .exceptions import DataError, NumericalError
from .links import LINKS
from .simstudy import ScenarioConfig, run_study

__all__ = ["main", "build_parser"]

THREADS_ENV = "CLUSTERSPEARMAN_THREADS"
EXIT_OK, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3

RECORD_FIELDS = ("estimator", "value", "se", "ci_lo", "ci_hi", "method", "ci_method", "level",
                 "clipped", "flags")
SIM_SCENARIOS = ("I", "II", "III", "negpairs", "ordinal5", "ordinal10")


class UsageError(Exception):
    """Bad flag values or combinations (exit code 2)."""


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _level(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"level must be in (0, 1), got {text}")
    return v


def _rho(text):
    v = float(text)
    if not -1.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"correlation must be in [-1, 1], got {text}")
    return v


def _default_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key = value file; its entries become flag defaults")
    common.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help=f"worker processes (default ${THREADS_ENV} or 1); "
                             "results do not depend on it")
    common.add_argument("--out", required=True, metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--link", choices=LINKS, default="probit")
    common.add_argument("--weights", choices=("cluster", "obs"), default="cluster")
    common.add_argument("--level", type=_level, default=0.95)
    common.add_argument("--finite-clusters", action=argparse.BooleanOptionalAction, default=None,
                        help="clusters are complete finite populations: apply the D "
                             "correction in the approximation estimator")

    parser = argparse.ArgumentParser(
        prog="clusterspearman",
        description="Total, between- and within-cluster Spearman rank correlations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", parents=[common], help="analyse a CSV file")
    est.add_argument("--input", required=True, metavar="CSV")
    est.add_argument("--cluster", required=True, metavar="COL")
    est.add_argument("--x", required=True, metavar="COL")
    est.add_argument("--y", required=True, metavar="COL")
    est.add_argument("--x-levels", metavar="A,B,C", help="ordered levels; makes x ordinal")
    est.add_argument("--y-levels", metavar="A,B,C", help="ordered levels; makes y ordinal")
    est.add_argument("--ci", choices=CI_METHODS, default="analytic")
    est.add_argument("--boot-reps", type=_positive_int, default=1000)
    est.add_argument("--psr", choices=("cpm", "nonparametric"), default="cpm")

    sim = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    sim.add_argument("--scenario", required=True, choices=SIM_SCENARIOS)
    sim.add_argument("--rho-b", type=_rho, required=True)
    sim.add_argument("--rho-w", type=_rho, required=True)
    sim.add_argument("--n", type=int, default=100, help="clusters per replicate")
    sim.add_argument("--k", default="20", help="cluster size: an integer or kmin:kmax")
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--ci", choices=CI_METHODS, default="analytic")
    sim.add_argument("--boot-reps", type=_positive_int, default=200)
    sim.add_argument("--psr", choices=("cpm", "nonparametric"), default="cpm")
    return parser


def _config_defaults(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    """Flag defaults from a config file, keyed by argparse destination."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    if not text.lstrip().startswith("["):
        text = f"[{command}]\n" + text
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config file: {exc}") from None
    section = cp[command] if cp.has_section(command) else cp[cp.sections()[0]]
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        raw = raw.strip()
        if isinstance(action, argparse.BooleanOptionalAction):
            out[dest] = raw.lower() in ("1", "true", "yes", "on")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        out[dest] = value
    return out


def _parse(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in ("estimate", "simulate"):
        sub = parser._subparsers._group_actions[0].choices[known.command]
        try:
            defaults = _config_defaults(known.config, known.command, sub)
        except UsageError as exc:
            parser.error(str(exc))
        sub.set_defaults(**defaults)
        # a config value satisfies a required flag
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    args = parser.parse_args(argv)
    if args.command == "simulate" and args.reps < 1:
        parser.error("--reps must be at least 1")
    return parser, args


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _options(args) -> dict:
    skip = {"command", "config", "out", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def _manifest(args, digest, started, extra=None) -> dict:
    m = {
        "command": args.command,
        "options": _options(args),
        "seed": args.seed,
        "version": __version__,
        "input_digest": digest,
        "timings": {"wall_seconds": round(time.perf_counter() - started, 6)},
    }
    if extra:
        m.update(extra)
    return m


def _records_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = {k: ("" if r[k] is None else r[k]) for k in RECORD_FIELDS}
        row["flags"] = ";".join(r["flags"])
        writer.writerow(row)
    return buf.getvalue()


def cmd_estimate(args) -> str:
    if args.ci == "analytic" and args.weights == "obs":
        raise UsageError("analytic intervals need equal-cluster weights; with --weights obs "
                         "use --ci bootstrap (or --weights cluster)")
    started = time.perf_counter()
    ds = load_csv(args.input, args.cluster, args.x, args.y,
                  x_levels=parse_levels(args.x_levels), y_levels=parse_levels(args.y_levels))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = analyze(ds, link=args.link, weights=args.weights, psr=args.psr,
                      finite_clusters=bool(args.finite_clusters), ci=args.ci, level=args.level,
                      boot_reps=args.boot_reps, seed=args.seed, n_jobs=args.threads)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    for note in res.notes:
        print(f"note: {note}", file=sys.stderr)
    if res.errors and not res.estimates:
        raise next(iter(res.errors.values()))
    records = res.records()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "estimates.json", {
        "n_clusters": ds.n_clusters,
        "n_obs": ds.n_obs,
        "options": _options(args),
        "records": records,
        "notes": res.notes,
    })
    (out / "estimates.csv").write_text(_records_csv(records), encoding="utf-8")
    _write_json(out / "manifest.json", _manifest(args, _sha256(args.input), started))
    vals = {r["estimator"]: r["value"] for r in records}

    def fmt(tag):
        v = vals.get(tag)
        return "NA" if v is None else f"{v:.3f}"

    return (f"estimate: n={ds.n_clusters} N={ds.n_obs} gamma_t={fmt('gamma_t')} "
            f"gamma_w={fmt('gamma_w')} gamma_b_median={fmt('gamma_b_median')} "
            f"gamma_b_approx={fmt('gamma_b_approx')} -> {out}")


def cmd_simulate(args) -> str:
    started = time.perf_counter()
    config = ScenarioConfig(args.scenario, args.rho_b, args.rho_w, n=args.n,
                            cluster_size=args.k, seed=args.seed)
    report = run_study(config, args.reps, ci=args.ci, link=args.link, weights=args.weights,
                       psr=args.psr, finite_clusters=args.finite_clusters, level=args.level,
                       boot_reps=args.boot_reps, n_jobs=args.threads)
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "study.json").write_text(report.to_json(), encoding="utf-8")
    _write_json(out / "manifest.json", _manifest(args, None, started))
    worst = max(report.rows, key=lambda r: abs(r["bias"]))
    return (f"simulate: {config.label} reps={args.reps} max|bias|={abs(worst['bias']):.3f} "
            f"({worst['estimator']}) -> {out}")


def main(argv=None) -> int:
    parser, args = _parse(sys.argv[1:] if argv is None else list(argv))
    try:
        summary = cmd_estimate(args) if args.command == "estimate" else cmd_simulate(args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ValueError, OSError) as exc:
        print(f"{parser.prog}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"{parser.prog}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
