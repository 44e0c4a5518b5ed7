"""Command-line front end.

Subcommands::

    fit       fit a model to a grouped CSV file
    simulate  write a simulated dataset from one of the built-in designs
    coverage  interval-coverage experiment over simulated replications
    sweep     per-group EP-versus-quadrature log-likelihood discrepancy
    predict   random-effect best predictions at given parameter values

Exit codes: 0 success, 2 input error, 3 convergence failure, 4 internal error.
Every report is deterministic for fixed inputs and flags; wall-clock timings
appear only with ``--timing``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataFormatError, GroupedDataset, read_csv, write_csv
from .fit import METHODS, FitConfig, FitResult, LogLikelihood, fit
from .study import STUDY1, STUDY2, SimConfig, discrepancy_sweep, loglog_slope, make_rng, run_coverage, simulate

SCHEMA = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3
EXIT_INTERNAL = 4

STUDIES = {"1": STUDY1, "2": STUDY2}

log = logging.getLogger("probit_ep")


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


@dataclass(frozen=True)
class CliConfig:
    subcommand: str
    input: str | None
    output: str | None
    alpha: float = 0.05
    tol: float = 1e-5
    max_iter: int = 100
    threads: int = 1
    seed: int = 0
    format: str = "json"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InputError("--alpha must lie in (0, 1)")
        if not self.tol > 0:
            raise InputError("--tol must be positive")
        if self.max_iter < 1:
            raise InputError("--max-iter must be at least 1")
        if self.threads < 1:
            raise InputError("--threads must be at least 1")


# --- serialisation -------------------------------------------------------

def _plain(x):
    """Convert numpy containers and scalars to JSON-ready values; non-finite
    floats become ``null``."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else None
    return x


def dumps(report: dict) -> str:
    return json.dumps(_plain(report), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "NA"
    return str(v)


def tsv(header: list[str], rows) -> str:
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _read_data(path: str) -> GroupedDataset:
    if path == "-":
        return read_csv(sys.stdin)
    if not Path(path).is_file():
        raise InputError(f"no such file: {path}")
    return read_csv(path)


# --- fit -----------------------------------------------------------------

def fit_report(data: GroupedDataset, res: FitResult, cfg: FitConfig) -> dict:
    labels = [g.label or str(i + 1) for i, g in enumerate(data.groups)]
    return {
        "schema": SCHEMA,
        "command": "fit",
        "method": res.method,
        "settings": {
            "alpha": cfg.alpha,
            "tol": cfg.tol,
            "max_iter": cfg.max_iter,
            "sweep_mode": cfg.sweep,
        },
        "data": {"groups": data.m, "observations": data.n_obs, "dF": data.dF, "dR": data.dR},
        "loglik": res.loglik,
        "estimates": {
            "beta": res.beta,
            "Sigma": res.Sigma,
            "theta": res.theta,
            "omega": res.omega,
        },
        "ci_table": [
            {"parameter": r.name, "lower": r.lower, "estimate": r.estimate, "upper": r.upper,
             "reliable": r.reliable}
            for r in res.ci_table
        ],
        "predictions": [
            {"group": lab, "u_tilde": u, "cov_tilde": c}
            for lab, u, c in zip(labels, res.u_tilde, res.cov_tilde)
        ],
        "diagnostics": res.diagnostics,
    }


def ci_text_table(res: FitResult) -> str:
    """Human-readable interval table: parameter, lower, estimate, upper."""
    level = f"{100 * (1 - res.alpha):g}%"
    head = f"{'parameter':<10} {'CI low':>12} {'estimate':>12} {'CI high':>12}"
    lines = [f"{res.method} fit, {level} intervals, loglik {res.loglik:.6f}", head]
    for r in res.ci_table:
        flag = "" if r.reliable else "  (unreliable)"
        lines.append(f"{r.name:<10} {r.lower:>12.5f} {r.estimate:>12.5f} {r.upper:>12.5f}{flag}")
    return "\n".join(lines) + "\n"


def cmd_fit(args, cc: CliConfig) -> int:
    data = _read_data(cc.input)
    cfg = FitConfig(method=args.method, alpha=cc.alpha, tol=cc.tol, max_iter=cc.max_iter,
                    sweep=args.sweep_mode)
    res = fit(data, cfg)
    if cc.format == "tsv":
        text = tsv(["parameter", "lower", "estimate", "upper", "reliable"],
                   [(r.name, r.lower, r.estimate, r.upper, int(r.reliable)) for r in res.ci_table])
    else:
        text = dumps(fit_report(data, res, cfg))
    _emit(text, cc.output)
    table = ci_text_table(res)
    if args.table:
        _emit(table, args.table)
    else:
        # keep stdout machine-readable when the report goes there
        (sys.stderr if cc.output in (None, "-") else sys.stdout).write(table)
    if not res.diagnostics.get("converged", False) or not math.isfinite(res.loglik):
        log.error("optimizer did not converge; the report is partial")
        return EXIT_CONVERGENCE
    return EXIT_OK


# --- simulate ------------------------------------------------------------

def _study_config(args, seed: int) -> SimConfig:
    base = STUDIES[args.study]
    kw: dict = {"seed": seed}
    if args.m is not None:
        kw["m"] = args.m
    if getattr(args, "n", None) is not None:
        kw["n_range"] = (args.n, args.n)
    try:
        return base.with_(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_simulate(args, cc: CliConfig) -> int:
    config = _study_config(args, cc.seed)
    data = simulate(config, make_rng(cc.seed))
    if cc.output in (None, "-"):
        write_csv(data, sys.stdout)
    else:
        write_csv(data, cc.output)
    return EXIT_OK


# --- coverage ------------------------------------------------------------

def _parse_methods(text: str) -> list[str]:
    methods = [m.strip().lower() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise InputError(f"--methods takes a comma list drawn from {','.join(METHODS)}")
    return methods


def cmd_coverage(args, cc: CliConfig) -> int:
    config = _study_config(args, cc.seed)
    methods = _parse_methods(args.methods)
    if args.reps < 0:
        raise InputError("--reps must be non-negative")
    fc = FitConfig(alpha=cc.alpha, tol=cc.tol, max_iter=cc.max_iter, sweep=args.sweep_mode)
    try:
        report = run_coverage(config, args.reps, cc.alpha, methods, fc)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    body = report.to_dict(timing=args.timing)
    if cc.format == "tsv":
        rows = []
        for meth in methods:
            for pc in body["methods"][meth]["parameters"]:
                lo, hi = pc["wilson99"]
                rows.append((meth, pc["parameter"], pc["truth"], pc["replications"], pc["hits"],
                             pc["coverage"], lo, hi, pc["mean_width"], pc["bias"]))
        text = tsv(["method", "parameter", "truth", "replications", "hits", "coverage",
                    "wilson99_low", "wilson99_high", "mean_width", "bias"], rows)
    else:
        text = dumps({"schema": SCHEMA, "command": "coverage", "replications": args.reps, **body})
    _emit(text, cc.output)
    return EXIT_OK


# --- sweep ---------------------------------------------------------------

def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{flag} takes a comma list of integers") from None
    if not vals or min(vals) < 1:
        raise InputError(f"{flag} values must be positive")
    return vals


def cmd_sweep(args, cc: CliConfig) -> int:
    base = STUDIES[args.study]
    if base.dR > 2:
        raise InputError("the quadrature oracle supports dR <= 2 only")
    grid = _parse_int_list(args.n_grid, "--n-grid")
    if args.reps < 1:
        raise InputError("--reps must be at least 1")
    rows = discrepancy_sweep(base.beta, base.Sigma_array, grid, reps=args.reps, seed=cc.seed,
                             order=args.order)
    usable = [r for r in rows if r.n > 1 and r.mean > 0]
    slope = loglog_slope(rows) if len(usable) >= 2 else None
    if cc.format == "tsv":
        text = tsv(["n", "groups", "mean", "sd"], [(r.n, r.groups, r.mean, r.sd) for r in rows])
    else:
        text = dumps({
            "schema": SCHEMA,
            "command": "sweep",
            "study": args.study,
            "seed": cc.seed,
            "order": args.order,
            "rows": [{"n": r.n, "groups": r.groups, "mean": r.mean, "sd": r.sd} for r in rows],
            "loglog_slope": slope,
        })
    _emit(text, cc.output)
    return EXIT_OK


# --- predict -------------------------------------------------------------

def _params_from_report(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        est = rep["estimates"]
        return np.asarray(est["beta"], dtype=float), np.atleast_2d(np.asarray(est["Sigma"], dtype=float))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read parameters from {path}: {exc}") from None


def _float_list(text: str, flag: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise InputError(f"{flag} takes a comma list of numbers") from None


def cmd_predict(args, cc: CliConfig) -> int:
    data = _read_data(cc.input)
    if args.fit:
        beta, Sigma = _params_from_report(args.fit)
    elif args.beta and args.sigma:
        beta = _float_list(args.beta, "--beta")
        s = _float_list(args.sigma, "--sigma")
        k = int(round(math.sqrt(s.size)))
        if k * k != s.size:
            raise InputError("--sigma takes the full covariance matrix row by row")
        Sigma = s.reshape(k, k)
    else:
        raise InputError("predict needs --fit REPORT or both --beta and --sigma")
    if beta.size != data.dF or Sigma.shape != (data.dR, data.dR):
        raise InputError(f"parameter dimensions do not match the data (dF={data.dF}, dR={data.dR})")
    if not np.allclose(Sigma, Sigma.T) or np.any(np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T)) <= 0):
        raise InputError("Sigma must be symmetric positive definite")
    cfg = FitConfig(method=args.method, tol=cc.tol, max_iter=cc.max_iter, sweep=args.sweep_mode)
    mean, cov = LogLikelihood(data, cfg).predictions(beta, Sigma)
    labels = [g.label or str(i + 1) for i, g in enumerate(data.groups)]
    if cc.format == "tsv":
        d = data.dR
        header = ["group"] + [f"u{a + 1}" for a in range(d)] + [
            f"cov{a + 1}{b + 1}" for a in range(d) for b in range(a, d)]
        rows = [[lab, *u, *[c[a, b] for a in range(d) for b in range(a, d)]]
                for lab, u, c in zip(labels, mean, cov)]
        text = tsv(header, rows)
    else:
        text = dumps({
            "schema": SCHEMA,
            "command": "predict",
            "method": cfg.method,
            "beta": beta,
            "Sigma": Sigma,
            "predictions": [{"group": lab, "u_tilde": u, "cov_tilde": c}
                            for lab, u, c in zip(labels, mean, cov)],
        })
    _emit(text, cc.output)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        log.error("some groups did not yield finite predictions")
        return EXIT_CONVERGENCE
    return EXIT_OK


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.05, help="interval level is 1 - alpha")
    common.add_argument("--tol", type=float, default=1e-5, help="EP convergence tolerance")
    common.add_argument("--max-iter", type=int, default=100, help="EP sweep limit per group")
    common.add_argument("--threads", type=int, default=1,
                        help="thread budget; group evaluation is currently serial")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("json", "tsv"), default="json")
    common.add_argument("--sweep-mode", choices=("fresh", "literal"), default="fresh",
                        help="EP site-update ordering")
    common.add_argument("-o", "--output", default=None, help="output path (default stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="probit-ep", description="Probit mixed models by expectation propagation.")
    sub = p.add_subparsers(dest="subcommand", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit a model to a CSV file")
    f.add_argument("input")
    f.add_argument("--method", choices=METHODS, default="ep")
    f.add_argument("--table", default=None, help="also write the plain-text interval table here")

    s = sub.add_parser("simulate", parents=[common], help="write a simulated dataset")
    s.add_argument("--study", choices=sorted(STUDIES), default="1")
    s.add_argument("--m", type=int, default=None, help="number of groups")
    s.add_argument("--n", type=int, default=None, help="fixed group size")

    c = sub.add_parser("coverage", parents=[common], help="interval coverage experiment")
    c.add_argument("--study", choices=sorted(STUDIES), default="1")
    c.add_argument("--m", type=int, default=None)
    c.add_argument("--n", type=int, default=None)
    c.add_argument("--reps", type=int, default=300)
    c.add_argument("--methods", default="ep")
    c.add_argument("--timing", action="store_true", help="include wall-clock quantiles")

    w = sub.add_parser("sweep", parents=[common], help="EP vs quadrature discrepancy by group size")
    w.add_argument("--study", choices=sorted(STUDIES), default="1")
    w.add_argument("--n-grid", default="1,2,8,32")
    w.add_argument("--reps", type=int, default=200)
    w.add_argument("--order", type=int, default=100, help="Gauss-Hermite points per dimension")

    r = sub.add_parser("predict", parents=[common], help="random-effect best predictions")
    r.add_argument("input")
    r.add_argument("--fit", default=None, help="JSON report from 'fit' supplying beta and Sigma")
    r.add_argument("--beta", default=None, help="comma list")
    r.add_argument("--sigma", default=None, help="comma list, full matrix row by row")
    r.add_argument("--method", choices=METHODS, default="ep")
    return p


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "coverage": cmd_coverage,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cc = CliConfig(args.subcommand, getattr(args, "input", None), args.output, args.alpha,
                       args.tol, args.max_iter, args.threads, args.seed, args.format)
        return COMMANDS[cc.subcommand](args, cc)
    except (InputError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
