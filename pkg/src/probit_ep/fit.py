"""Maximum (approximate) likelihood fitting and Wald-type intervals.

The random-effect covariance is optimised through two unconstrained
encodings:

``theta``  half-vectorised ``log(Sigma) / 2`` (matrix logarithm), used for the
           main search;
``omega``  log standard deviations followed by Fisher-z correlations, used for
           the final polish, the Hessian and the confidence intervals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import GroupedDataset
from .ep import ImproperMessageError, ep_logliks
from .linalg import (
    diagonal_of,
    from_diagonal_and_vecbd,
    matrix_exp,
    matrix_log,
    unvech,
    vech,
    vech_length,
    vecbd,
)
from .oracles import aghq_dataset_moments, aghq_logliks, laplace_fits
from .special import std_normal_ppf

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
METHODS = ("ep", "laplace", "aghq")


# --- covariance encodings -------------------------------------------------

def sigma_from_theta(theta, d: int | None = None) -> np.ndarray:
    return matrix_exp(2.0 * unvech(theta, d))


def theta_from_sigma(Sigma) -> np.ndarray:
    return vech(0.5 * matrix_log(np.atleast_2d(Sigma)))


def omega_from_sigma(Sigma) -> np.ndarray:
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    sd = np.sqrt(diagonal_of(Sigma))
    if Sigma.shape[0] == 1:
        return np.log(sd)
    corr = vecbd(Sigma) / vecbd(np.outer(sd, sd))
    return np.concatenate([np.log(sd), np.arctanh(corr)])


def sigma_from_omega(omega, d: int) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.size != vech_length(d):
        raise ValueError(f"omega must have length {vech_length(d)} for d={d}")
    if d == 1:
        return np.exp(2.0 * omega).reshape(1, 1)
    sd = np.exp(omega[:d])
    below = np.tanh(omega[d:]) * vecbd(np.outer(sd, sd))
    return from_diagonal_and_vecbd(sd**2, below)


def theta_to_omega(theta, d: int) -> np.ndarray:
    return omega_from_sigma(sigma_from_theta(theta, d))


def omega_to_theta(omega, d: int) -> np.ndarray:
    return theta_from_sigma(sigma_from_omega(omega, d))


def param_names(dF: int, dR: int) -> list[str]:
    names = [f"beta{k}" for k in range(1, dF + 1)]
    names += [f"sigma{k}" for k in range(1, dR + 1)]
    names += [f"rho{j + 1}{i + 1}" for j in range(dR) for i in range(j + 1, dR)]
    return names


# --- objective -----------------------------------------------------------

@dataclass
class FitConfig:
    method: str = "ep"
    alpha: float = 0.05
    tol: float = 1e-5
    max_iter: int = 100
    sweep: str = "fresh"
    # EP tolerance while finite differencing (gradients and Hessian)
    fd_tol: float = 1e-8
    aghq_order: int = 100
    nm_edge: float = 0.1
    nm_budget_per_param: int = 200
    bfgs_gtol: float = 1e-5
    bfgs_maxiter: int = 500
    refresh_threshold: float = 1e-2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


class LogLikelihood:
    """Approximate log-likelihood of a dataset as a function of ``(beta, Sigma)``.

    EP starting sites come from Laplace predictions of the random effects,
    recomputed only once ``beta`` or ``Sigma`` has moved by more than
    ``refresh_threshold`` (max-norm) since they were last computed.
    """

    def __init__(self, data: GroupedDataset, config: FitConfig | None = None):
        self.data = data
        self.packed = data.packed()
        self.config = config or FitConfig()
        self.dF, self.dR = data.dF, data.dR
        self._anchor: tuple[np.ndarray, np.ndarray] | None = None
        self._uhat = np.zeros((data.m, data.dR))
        self.n_evals = 0
        self.n_failed = 0

    def _predictions(self, beta, Sigma) -> np.ndarray:
        thr = self.config.refresh_threshold
        if self._anchor is not None:
            b0, S0 = self._anchor
            if np.max(np.abs(beta - b0)) <= thr and np.max(np.abs(Sigma - S0)) <= thr:
                return self._uhat
        lf = laplace_fits(self.packed, beta, Sigma, self._uhat)
        self._uhat = lf.modes
        self._anchor = (beta.copy(), Sigma.copy())
        return self._uhat

    def __call__(self, beta, Sigma, tol: float | None = None) -> float:
        """Returns ``-inf`` when the evaluation fails (EP not converged or a
        degenerate message)."""
        beta = np.asarray(beta, dtype=float)
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        self.n_evals += 1
        cfg = self.config
        if not np.all(np.isfinite(Sigma)) or not np.all(np.isfinite(beta)):
            self.n_failed += 1
            return -math.inf
        try:
            if cfg.method == "ep":
                res = ep_logliks(self.packed, beta, Sigma, self._predictions(beta, Sigma),
                                 tol=tol if tol is not None else cfg.tol,
                                 max_iter=cfg.max_iter, sweep=cfg.sweep)
                if not res.converged.all():
                    self.n_failed += 1
                    return -math.inf
                value = res.total
            elif cfg.method == "laplace":
                lf = laplace_fits(self.packed, beta, Sigma, self._uhat)
                self._uhat = lf.modes
                value = float(np.sum(lf.loglik))
            else:
                value = float(np.sum(aghq_logliks(self.packed, beta, Sigma, cfg.aghq_order)))
        except (ImproperMessageError, ValueError, np.linalg.LinAlgError):
            self.n_failed += 1
            return -math.inf
        if not math.isfinite(value):
            self.n_failed += 1
            return -math.inf
        return value

    def at_theta(self, x, tol: float | None = None) -> float:
        beta, theta = x[: self.dF], x[self.dF:]
        try:
            with np.errstate(over="ignore"):
                Sigma = sigma_from_theta(theta, self.dR)
        except (ArithmeticError, ValueError):
            return -math.inf
        return self(beta, Sigma, tol)

    def at_omega(self, x, tol: float | None = None) -> float:
        beta, omega = x[: self.dF], x[self.dF:]
        with np.errstate(over="ignore"):
            Sigma = sigma_from_omega(omega, self.dR)
        return self(beta, Sigma, tol)

    def predictions(self, beta, Sigma):
        """Per-group approximate conditional mean and covariance of ``u``."""
        beta = np.asarray(beta, dtype=float)
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        cfg = self.config
        if cfg.method == "ep":
            res = ep_logliks(self.packed, beta, Sigma, self._predictions(beta, Sigma),
                             tol=min(cfg.tol, cfg.fd_tol), max_iter=cfg.max_iter, sweep=cfg.sweep)
            return res.mean, res.cov
        if cfg.method == "laplace":
            lf = laplace_fits(self.packed, beta, Sigma, self._uhat)
            return lf.modes, np.linalg.inv(lf.neg_hess)
        return aghq_dataset_moments(self.packed, beta, Sigma, cfg.aghq_order)


# --- numerical derivatives -----------------------------------------------

def fd_gradient(f, x) -> np.ndarray:
    """Central differences, step ``eps^(1/3) (1 + |x_k|)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = EPS ** (1 / 3) * (1.0 + abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_hessian(f, x) -> np.ndarray:
    """Central second differences, step ``eps^(1/4) (1 + |x_k|)``."""
    x = np.asarray(x, dtype=float)
    p = x.size
    h = EPS**0.25 * (1.0 + np.abs(x))
    f0 = f(x)
    H = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


# --- intervals -----------------------------------------------------------

@dataclass(frozen=True)
class CIRow:
    name: str
    lower: float
    estimate: float
    upper: float
    reliable: bool = True


def ci_multiplier(alpha: float) -> float:
    return std_normal_ppf(1.0 - 0.5 * alpha)


def wald_intervals(hessian, estimates, alpha: float = 0.05):
    """``estimate +/- z * sqrt(-diag(H^{-1}))`` on the working scale.

    Returns (lower, upper, ok); entries whose variance is not positive are NaN.
    """
    estimates = np.asarray(estimates, dtype=float)
    H = np.asarray(hessian, dtype=float)
    try:
        var = -np.diag(np.linalg.inv(H))
    except np.linalg.LinAlgError:
        nan = np.full_like(estimates, np.nan)
        return nan, nan.copy(), np.zeros(estimates.size, dtype=bool)
    ok = np.isfinite(var) & (var > 0)
    half = np.full_like(estimates, np.nan)
    half[ok] = ci_multiplier(alpha) * np.sqrt(var[ok])
    return estimates - half, estimates + half, ok


def confidence_intervals(hessian_omega, beta, omega, alpha: float = 0.05) -> list[CIRow]:
    """Intervals for ``beta``, the standard deviations and the correlations.

    The ``omega`` limits are mapped through ``exp`` (log standard deviations)
    and ``tanh`` (Fisher-z correlations).
    """
    beta = np.asarray(beta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    dF = beta.size
    dR = int(round((math.sqrt(8 * omega.size + 1) - 1) / 2))
    lo, hi, ok = wald_intervals(hessian_omega, np.concatenate([beta, omega]), alpha)
    names = param_names(dF, dR)
    rows = []
    for k, name in enumerate(names):
        est, l, u = (np.concatenate([beta, omega])[k], lo[k], hi[k])
        if k >= dF + dR:
            est, l, u = np.tanh(est), np.tanh(l), np.tanh(u)
        elif k >= dF:
            est, l, u = np.exp(est), np.exp(l), np.exp(u)
        rows.append(CIRow(name, float(l), float(est), float(u), bool(ok[k])))
    return rows


# --- driver --------------------------------------------------------------

@dataclass
class FitResult:
    method: str
    beta: np.ndarray
    Sigma: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    loglik: float
    hessian_omega: np.ndarray
    ci_table: list[CIRow]
    alpha: float
    u_tilde: np.ndarray
    cov_tilde: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def ci_reliable(self) -> bool:
        return all(r.reliable for r in self.ci_table)


def probit_glm_start(data: GroupedDataset, max_iter: int = 25) -> np.ndarray:
    """Fixed effects of an ordinary probit regression (no random effects), by IRLS."""
    from .special import _norm_cdf, _norm_pdf

    pk = data.packed()
    X, y = pk.XF, pk.y
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.clip([_norm_cdf(v) for v in eta], 1e-10, 1 - 1e-10)
        dens = np.maximum([_norm_pdf(v) for v in eta], 1e-12)
        w = dens**2 / (mu * (1 - mu))
        z = eta + (y - mu) / dens
        XtW = X.T * w
        try:
            new = np.linalg.solve(XtW @ X + 1e-8 * np.eye(X.shape[1]), XtW @ z)
        except np.linalg.LinAlgError:
            break
        new = np.clip(new, -10.0, 10.0)
        if np.max(np.abs(new - beta)) < 1e-8:
            beta = new
            break
        beta = new
    return beta


_PENALTY = 1e300


def _negated(f):
    def g(x):
        v = f(x)
        return -v if math.isfinite(v) else _PENALTY
    return g


def _bfgs(fun, x0, cfg: FitConfig):
    res = minimize(fun, x0, method="BFGS", jac=lambda x: fd_gradient(fun, x),
                   options={"gtol": cfg.bfgs_gtol, "maxiter": cfg.bfgs_maxiter, "norm": np.inf})
    return res


def fit(data: GroupedDataset, config: FitConfig | None = None) -> FitResult:
    """Two-stage fit: Nelder-Mead then BFGS over ``(beta, theta)``, then a BFGS
    polish and finite-difference Hessian over ``(beta, omega)``."""
    cfg = config or FitConfig()
    ll = LogLikelihood(data, cfg)
    dF, dR = data.dF, data.dR
    x0 = np.concatenate([probit_glm_start(data), np.zeros(vech_length(dR))])
    p = x0.size
    diag: dict = {}

    # stage 1: (beta, theta)
    f_theta = _negated(ll.at_theta)
    simplex = np.vstack([x0] + [x0 + cfg.nm_edge * np.eye(p)[k] for k in range(p)])
    nm = minimize(f_theta, x0, method="Nelder-Mead",
                  options={"maxfev": cfg.nm_budget_per_param * p, "initial_simplex": simplex,
                           "xatol": 1e-4, "fatol": 1e-6})
    diag["nelder_mead"] = {"evaluations": int(nm.nfev), "converged": bool(nm.success)}
    f_theta_fd = _negated(lambda x: ll.at_theta(x, min(cfg.tol, cfg.fd_tol)))
    b1 = _bfgs(f_theta_fd, nm.x, cfg)
    x_theta = b1.x if b1.fun <= nm.fun else nm.x
    diag["bfgs_theta"] = {"iterations": int(b1.nit), "converged": bool(b1.success), "message": str(b1.message)}

    # stage 2: (beta, omega)
    beta1, theta1 = x_theta[:dF], x_theta[dF:]
    omega1 = theta_to_omega(theta1, dR)
    f_omega = _negated(lambda x: ll.at_omega(x, min(cfg.tol, cfg.fd_tol)))
    x1 = np.concatenate([beta1, omega1])
    b2 = _bfgs(f_omega, x1, cfg)
    x_omega = b2.x if b2.fun <= f_omega(x1) else x1
    diag["bfgs_omega"] = {"iterations": int(b2.nit), "converged": bool(b2.success), "message": str(b2.message)}

    beta_hat, omega_hat = x_omega[:dF], x_omega[dF:]
    Sigma_hat = sigma_from_omega(omega_hat, dR)
    loglik = ll(beta_hat, Sigma_hat, min(cfg.tol, cfg.fd_tol))
    H = -fd_hessian(f_omega, x_omega)
    grad = -fd_gradient(f_omega, x_omega)
    rows = confidence_intervals(H, beta_hat, omega_hat, cfg.alpha)
    try:
        hess_nd = bool(np.all(np.linalg.eigvalsh(0.5 * (H + H.T)) < 0))
    except np.linalg.LinAlgError:
        hess_nd = False
    u_tilde, cov_tilde = ll.predictions(beta_hat, Sigma_hat)
    diag.update(
        evaluations=ll.n_evals,
        failed_evaluations=ll.n_failed,
        gradient_maxnorm=float(np.max(np.abs(grad))),
        hessian_negative_definite=hess_nd,
        converged=bool(math.isfinite(loglik) and (b2.success or np.max(np.abs(grad)) < 10 * cfg.bfgs_gtol)),
    )
    if not hess_nd:
        log.warning("Hessian is not negative definite at the optimum; intervals unreliable")
        rows = [CIRow(r.name, r.lower, r.estimate, r.upper, False) for r in rows]
    return FitResult(
        method=cfg.method,
        beta=beta_hat,
        Sigma=Sigma_hat,
        theta=theta_from_sigma(Sigma_hat),
        omega=omega_hat,
        loglik=float(loglik),
        hessian_omega=H,
        ci_table=rows,
        alpha=cfg.alpha,
        u_tilde=np.asarray(u_tilde),
        cov_tilde=np.asarray(cov_tilde),
        diagnostics=diag,
    )
