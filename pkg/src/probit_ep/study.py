"""Simulation studies: data generation, interval-coverage experiments and
EP-versus-quadrature log-likelihood discrepancy sweeps."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .data import Group, GroupedDataset
from .ep import ep_logliks
from .fit import FitConfig, fit, omega_from_sigma, param_names
from .oracles import aghq_logliks, laplace_fits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """``n_range`` is an inclusive (low, high) range for a discrete-uniform
    group size; equal ends give a fixed size.  Fixed-effect design rows are
    ``[1, x_1, ..., x_{dF-1}]`` with iid Uniform(0, 1) ``x``; random-effect
    rows are the first ``dR`` entries of those."""

    beta: tuple[float, ...]
    Sigma: tuple[tuple[float, ...], ...]
    m: int
    n_range: tuple[int, int]
    seed: int = 0

    def __post_init__(self):
        S = self.Sigma_array
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
            raise ValueError("Sigma must be symmetric")
        if np.any(np.linalg.eigvalsh(S) <= 0):
            raise ValueError("Sigma must be positive definite")
        if S.shape[0] > len(self.beta):
            raise ValueError("random-effect design must be a sub-vector of the fixed-effect design")
        if self.m < 1 or self.n_range[0] < 1 or self.n_range[1] < self.n_range[0]:
            raise ValueError("need m >= 1 and 1 <= n_low <= n_high")

    @property
    def beta_array(self) -> np.ndarray:
        return np.asarray(self.beta, dtype=float)

    @property
    def Sigma_array(self) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.Sigma, dtype=float))

    @property
    def dF(self) -> int:
        return len(self.beta)

    @property
    def dR(self) -> int:
        return self.Sigma_array.shape[0]

    def with_(self, **kw) -> "SimConfig":
        d = dict(beta=self.beta, Sigma=self.Sigma, m=self.m, n_range=self.n_range, seed=self.seed)
        d.update(kw)
        return SimConfig(**d)


STUDY1 = SimConfig(beta=(0.0, 1.0), Sigma=((1.0,),), m=100, n_range=(2, 2))
STUDY2 = SimConfig(
    beta=(0.37, 0.93, -0.46, 0.08, -1.34, 1.09),
    Sigma=((0.53, -0.36), (-0.36, 0.92)),
    m=250,
    n_range=(20, 30),
)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def simulate(config: SimConfig, rng: np.random.Generator | None = None) -> GroupedDataset:
    """Draw a dataset from the probit mixed model described by ``config``."""
    if rng is None:
        rng = make_rng(config.seed)
    beta = config.beta_array
    L = np.linalg.cholesky(config.Sigma_array)
    dF, dR = config.dF, config.dR
    lo, hi = config.n_range
    groups = []
    for i in range(config.m):
        n = int(rng.integers(lo, hi + 1))
        X = np.ones((n, dF))
        if dF > 1:
            X[:, 1:] = rng.uniform(size=(n, dF - 1))
        u = L @ rng.standard_normal(dR)
        prob = ndtr(X @ beta + X[:, :dR] @ u)
        y = (rng.uniform(size=n) < prob).astype(float)
        groups.append(Group(y=y, xF=X, xR=X[:, :dR].copy(), label=str(i + 1)))
    return GroupedDataset(groups)


# --- coverage ------------------------------------------------------------

def wilson_interval(hits: int, n: int, level: float = 0.99) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    z = norm.ppf(0.5 + 0.5 * level)
    p = hits / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass
class ParamCoverage:
    name: str
    truth: float
    replications: int = 0
    hits: int = 0
    widths: list[float] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.hits / self.replications if self.replications else float("nan")

    def to_dict(self) -> dict:
        lo, hi = wilson_interval(self.hits, self.replications)
        return {
            "parameter": self.name,
            "truth": self.truth,
            "replications": self.replications,
            "hits": self.hits,
            "coverage": self.coverage if self.replications else None,
            "wilson99": [lo, hi],
            "mean_width": float(np.mean(self.widths)) if self.widths else None,
            "bias": float(np.mean(self.errors)) if self.errors else None,
        }


@dataclass
class CoverageReport:
    """Per-method, per-parameter interval coverage over replications."""

    config: SimConfig
    alpha: float
    methods: list[str]
    params: dict[str, list[ParamCoverage]]
    completed: dict[str, int]
    excluded: dict[str, list[int]]
    times: dict[str, list[float]]

    def coverage(self, method: str, name: str) -> float:
        for pc in self.params[method]:
            if pc.name == name:
                return pc.coverage
        raise KeyError(name)

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "alpha": self.alpha,
            "config": {
                "beta": list(self.config.beta),
                "Sigma": [list(r) for r in self.config.Sigma],
                "m": self.config.m,
                "n_range": list(self.config.n_range),
                "seed": self.config.seed,
            },
            "methods": {},
        }
        for meth in self.methods:
            entry = {
                "completed": self.completed[meth],
                "excluded": list(self.excluded[meth]),
                "parameters": [pc.to_dict() for pc in self.params[meth]],
            }
            if timing:
                t = self.times[meth]
                entry["time_quantiles"] = (
                    dict(zip(["min", "q25", "median", "q75", "max"],
                             [float(v) for v in np.quantile(t, [0, 0.25, 0.5, 0.75, 1])]))
                    if t else None
                )
            out["methods"][meth] = entry
        return out


def true_interpretable(config: SimConfig) -> np.ndarray:
    """True values of (beta, sigma, rho) in interval-table order."""
    omega = omega_from_sigma(config.Sigma_array)
    dR = config.dR
    vals = np.concatenate([config.beta_array, np.exp(omega[:dR]), np.tanh(omega[dR:])])
    return vals


def run_coverage(config: SimConfig, n_reps: int, alpha: float = 0.05,
                 methods=("ep",), fit_config: FitConfig | None = None,
                 progress=None) -> CoverageReport:
    """Simulate ``n_reps`` datasets and record whether each method's intervals
    cover the true parameters.  Replication ``r`` uses the stream
    ``(config.seed, r)``, so runs are reproducible piecewise."""
    methods = [m.lower() for m in methods]
    if config.dR > 2 and "aghq" in methods:
        raise ValueError("the quadrature method supports dR <= 2 only")
    names = param_names(config.dF, config.dR)
    truth = true_interpretable(config)
    params = {m: [ParamCoverage(n, float(t)) for n, t in zip(names, truth)] for m in methods}
    completed = {m: 0 for m in methods}
    excluded: dict[str, list[int]] = {m: [] for m in methods}
    times: dict[str, list[float]] = {m: [] for m in methods}
    base = fit_config or FitConfig()
    for r in range(n_reps):
        data = simulate(config, make_rng(config.seed, r))
        for meth in methods:
            cfg = FitConfig(**{**base.__dict__, "method": meth, "alpha": alpha})
            t0 = time.perf_counter()
            try:
                res = fit(data, cfg)
            except Exception as exc:  # noqa: BLE001 - recorded and excluded
                log.warning("replication %d (%s) failed: %s", r, meth, exc)
                excluded[meth].append(r)
                continue
            times[meth].append(time.perf_counter() - t0)
            if not all(np.isfinite([row.lower for row in res.ci_table] + [row.upper for row in res.ci_table])):
                excluded[meth].append(r)
                continue
            completed[meth] += 1
            for pc, row in zip(params[meth], res.ci_table):
                pc.replications += 1
                pc.hits += int(row.lower <= pc.truth <= row.upper)
                pc.widths.append(row.upper - row.lower)
                pc.errors.append(row.estimate - pc.truth)
        if progress is not None:
            progress(r)
    return CoverageReport(config, alpha, list(methods), params, completed, excluded, times)


# --- discrepancy sweep ---------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    n: int
    groups: int
    mean: float
    sd: float


def discrepancy_sweep(beta, Sigma, n_grid, reps: int = 200, seed: int = 0,
                      order: int = 100, tol: float = 1e-10) -> list[SweepRow]:
    """Mean and sd of ``|l_i - l~_i|`` over ``reps`` simulated groups per group size."""
    beta = tuple(float(b) for b in np.atleast_1d(beta))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape[0] > 2:
        raise ValueError("the quadrature oracle supports dR <= 2 only")
    rows = []
    for k, n in enumerate(n_grid):
        cfg = SimConfig(beta=beta, Sigma=tuple(map(tuple, Sigma)), m=reps, n_range=(int(n), int(n)), seed=seed)
        data = simulate(cfg, make_rng(seed, 10_000 + k))
        pk = data.packed()
        uhat = laplace_fits(pk, cfg.beta_array, Sigma).modes
        ep = ep_logliks(pk, cfg.beta_array, Sigma, uhat, tol=tol)
        exact = aghq_logliks(pk, cfg.beta_array, Sigma, order)
        diff = np.abs(exact - ep.loglik)
        rows.append(SweepRow(int(n), reps, float(np.mean(diff)), float(np.std(diff, ddof=1)) if reps > 1 else 0.0))
    return rows


def loglog_slope(rows: list[SweepRow]) -> float:
    """Least-squares slope of log(mean discrepancy) on log(n), n > 1 rows only."""
    pts = [(math.log(r.n), math.log(r.mean)) for r in rows if r.n > 1 and r.mean > 0]
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])
