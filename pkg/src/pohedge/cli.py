"""Batch command line: validate, simulate, filter, hedge, verify, report.

Exit codes: 0 success, 1 invalid configuration, 2 model failed validation,
3 acceptance criteria failed.  Outputs go to ``--out`` (or ``$POHEDGE_OUT``,
default ``./pohedge_out``); reruns with the same config and seed are
byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from .errors import PohedgeError
from .model import ModelSpec, scenario_path, spec_from_dict, validate_model

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_FAILED = 0, 1, 2, 3
DEFAULT_SCENARIO = "two_regime_small"
RUN_DEFAULTS = {"n_steps": 16, "n_paths": 1000, "measure": "P", "basis_degree": 3, "lattice_depth": 4,
                "train_paths": 10_000, "csv_paths": 1}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def load_config(ref: str | None):
    """Return ``(spec, run_params)`` from a config path or a shipped scenario name.

    A config is either a bare model document or ``{"model": {...}, "run": {...}}``.
    """
    ref = ref or DEFAULT_SCENARIO
    path = Path(ref)
    if not path.exists() and scenario_path(ref).exists():
        path = scenario_path(ref)
    if not path.exists():
        raise ConfigError(f"{ref}:1: no such config file or shipped scenario")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    model = doc.get("model", doc)
    run = dict(RUN_DEFAULTS)
    extra = doc.get("run", {}) if "model" in doc else {}
    unknown = set(extra) - set(RUN_DEFAULTS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}:{_line_of(text, key)}: unknown run parameter {key!r}")
    run.update(extra)
    try:
        spec = spec_from_dict(model)
    except (PohedgeError, ValueError, TypeError) as exc:
        quoted = re.findall(r"'([^']+)'", str(exc))
        line = _line_of(text, quoted[0]) if quoted else 1
        raise ConfigError(f"{path}:{line}: {exc}") from exc
    return spec, run


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("POHEDGE_OUT", "pohedge_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("POHEDGE_THREADS", "1")))


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _require_valid(spec: ModelSpec, out: Path) -> int | None:
    report = validate_model(spec)
    if not report.passed:
        _write(out / "validation.json", _json(report.to_dict()))
        for c in report.failed():
            print(f"validation failed: {c.name}: {c.message}", file=sys.stderr)
        return EXIT_INVALID
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args, spec, run) -> int:
    out = _out_dir(args)
    report = validate_model(spec)
    _write(out / "validation.json", _json(report.to_dict()))
    for c in report.checks:
        print(f"[{'ok' if c.passed else 'FAIL'}] {c.name}" + (f": {c.message}" if c.message else ""))
    return EXIT_OK if report.passed else EXIT_INVALID


def _ensemble_csv(ps) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["path", "t", "X", "S", "z"])
    for i in range(len(ps)):
        for n in range(ps.t.size):
            z = repr(float(ps.z[i, n - 1])) if n > 0 else ""
            w.writerow([i, repr(float(ps.t[n])), repr(float(ps.X[i, n])), repr(float(ps.S[i, n])), z])
    return buf.getvalue()


def cmd_simulate(args, spec, run) -> int:
    from .simulate import simulate_ensemble, write_ensemble

    out = _out_dir(args)
    bad = _require_valid(spec, out)
    if bad:
        return bad
    ps = simulate_ensemble(spec, run["n_steps"], run["measure"], run["n_paths"], args.seed)
    write_ensemble(ps, out / f"ensemble_{run['measure']}.bin")
    _write(out / f"ensemble_{run['measure']}.csv", _ensemble_csv(ps))
    print(f"{len(ps)} paths, {ps.n_steps} steps under {run['measure']} -> {out}")
    return EXIT_OK


def _filter_csv(t, pi, dI) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    d = pi.shape[2]
    w.writerow(["path", "t"] + [f"p_{i + 1}" for i in range(d)] + ["dI"])
    for k in range(pi.shape[0]):
        for n in range(t.size):
            dI_cell = repr(float(dI[k, n - 1])) if n > 0 else ""
            w.writerow([k, repr(float(t[n]))] + [repr(float(v)) for v in pi[k, n]] + [dI_cell])
    return buf.getvalue()


def cmd_filter(args, spec, run) -> int:
    from .filtering import filter_ensemble
    from .simulate import read_ensemble, simulate_ensemble

    out = _out_dir(args)
    bad = _require_valid(spec, out)
    if bad:
        return bad
    if args.ensemble:
        ps = read_ensemble(args.ensemble)
    else:
        ps = simulate_ensemble(spec, run["n_steps"], run["measure"], run["n_paths"], args.seed)
    diag = {"schema": "pohedge.innovations/1", "n_paths": len(ps), "n_steps": ps.n_steps,
            "data_measure": ps.measure, "filters": {}}
    h = spec.T / ps.n_steps
    for measure in ("P", "Pstar"):
        traj = filter_ensemble(spec, ps, measure)
        _write(out / f"filter_{measure}.csv", _filter_csv(ps.t, traj.pi, traj.dI))
        dI = traj.dI.ravel()
        diag["filters"][measure] = {
            "innovation_mean": float(dI.mean()) if dI.size else 0.0,
            "innovation_var_over_h": float(dI.var() / h) if dI.size else 0.0,
            "min_probability": float(traj.pi.min()) if traj.pi.size else 1.0,
        }
    _write(out / "innovations.json", _json(diag))
    print(f"filtered {len(ps)} paths -> {out}")
    return EXIT_OK


def cmd_hedge(args, spec, run) -> int:
    from .decomp import HedgeReport, hedge_series, martingale_increments, residual_paths, tree_comparison
    from .filtering import filter_ensemble
    from .oracle import orthogonality_estimate
    from .simulate import simulate_ensemble
    from .valuefn import fit_g_regression, save_g, training_ensemble
    from .verify import probe_processes

    out = _out_dir(args)
    bad = _require_valid(spec, out)
    if bad:
        return bad
    n = run["n_steps"]
    ens, pit = training_ensemble(spec, n, run["train_paths"], args.seed)
    g = fit_g_regression(spec, ens, basis_degree=run["basis_degree"], pi=pit)
    save_g(g, out / "g.json")
    ps = simulate_ensemble(spec, n, "P", run["n_paths"], args.seed + 1)
    pi = filter_ensemble(spec, ps, "P").pi
    pis = filter_ensemble(spec, ps, "Pstar").pi
    hs = hedge_series(spec, g, ps.t, ps.S, pi, pis)
    res = residual_paths(spec, g, ps.t, ps.S, ps.x_idx, pi, pis, hs)
    orth = []
    if len(ps) > 1:
        dM = martingale_increments(spec, ps.t, ps.S, ps.x_idx)
        phis = probe_processes(ps.t, ps.S, pi, spec.s0)
        stats = orthogonality_estimate(res.A_T, np.column_stack([np.sum(f * dM, axis=1) for f in phis.values()]))
        orth = [dict(name=k, **v) for k, v in zip(phis, stats)]
    oracle = tree_comparison(spec, run["lattice_depth"]) if run["lattice_depth"] else {}
    report = HedgeReport(ps.t, ps.S, pi, pis, hs, res, orth, oracle)
    _write(out / "hedge_summary.json", report.summary_json() + "\n")
    for i in range(min(run["csv_paths"], len(ps))):
        _write(out / f"hedge_path_{i}.csv", report.path_csv(i))
    print(f"hedge report for {len(ps)} paths -> {out}")
    return EXIT_OK


def cmd_verify(args, spec, run) -> int:
    from .verify import report_json, resolve_suite, run_suite, summary_lines

    out = _out_dir(args)
    bad = _require_valid(spec, out)
    if bad:
        return bad
    try:
        resolve_suite(args.suite)
    except ValueError as exc:
        print(f"--suite:1: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_suite(spec, seed=args.seed, suite=args.suite, threads=_threads(args))
    _write(out / "verify.json", report_json(report))
    for line in summary_lines(report):
        print(line)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def _flatten(prefix, obj, rows):
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, rows)
    else:
        rows.append((prefix, obj))


def cmd_report(args, spec, run) -> int:
    """Turn every CSV and JSON artifact in the output directory into one long table."""
    out = _out_dir(args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["source", "row", "column", "value"])
    for path in sorted(out.iterdir()):
        if path.name == "report.csv":
            continue
        if path.suffix == ".csv":
            with open(path, newline="") as fh:
                for r, row in enumerate(csv.DictReader(fh)):
                    for col, val in row.items():
                        w.writerow([path.name, r, col, val])
        elif path.suffix == ".json":
            rows = []
            _flatten("", json.loads(path.read_text()), rows)
            for key, val in rows:
                w.writerow([path.name, "", key, "" if val is None else val])
    _write(out / "report.csv", buf.getvalue())
    print(f"long-format table -> {out / 'report.csv'}")
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "filter": cmd_filter, "hedge": cmd_hedge,
            "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pohedge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"config JSON path or shipped scenario name (default {DEFAULT_SCENARIO})")
        p.add_argument("--out", help="output directory (default $POHEDGE_OUT or ./pohedge_out)")
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--threads", type=int, default=None, help="worker processes (default $POHEDGE_THREADS or 1)")
        p.add_argument("--suite", default=None, help="verify: suite names or criterion numbers, comma separated")
        if name == "filter":
            p.add_argument("--ensemble", help="binary ensemble written by 'simulate'")
        if name in ("simulate", "filter", "hedge"):
            p.add_argument("--n-paths", type=int, default=None)
            p.add_argument("--n-steps", type=int, default=None)
        if name in ("simulate", "filter"):
            p.add_argument("--measure", choices=("P", "Pstar"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec, run = load_config(args.config)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    for key in ("n_paths", "n_steps", "measure"):
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    if run["n_paths"] < 0 or run["n_steps"] < 1:
        print(f"{args.config or DEFAULT_SCENARIO}:1: n_paths must be >= 0 and n_steps >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, spec, run)
    except PohedgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
