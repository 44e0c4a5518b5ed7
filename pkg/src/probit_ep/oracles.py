"""Ground-truth engines the EP approximation is judged against.

* adaptive Gauss-Hermite quadrature (AGHQ) for the exact log-likelihood and
  posterior moments, for one- and two-dimensional random effects;
* the Laplace approximation, both as a baseline estimator and as the source
  of random-effect predictions for EP starting values;
* closed-form Gaussian expectations of ``Phi(a + b^T x)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_hermite

from . import _kernels
from .data import Group, GroupedDataset, PackedData
from .special import _log_norm_cdf, _norm_cdf, _norm_pdf

log = logging.getLogger(__name__)

MAX_NEWTON = 50


class UnsupportedOracleDimension(ValueError):
    pass


@dataclass(frozen=True)
class GHRule:
    """Gauss-Hermite rule for the weight ``exp(-x^2)``."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.size

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


_GH_CACHE: dict[int, GHRule] = {}


def gh_rule(order: int) -> GHRule:
    if order < 1:
        raise ValueError("order must be >= 1")
    rule = _GH_CACHE.get(order)
    if rule is None:
        x, w = roots_hermite(order)
        x = 0.5 * (x - x[::-1])  # exact symmetry
        w = 0.5 * (w + w[::-1])
        x.flags.writeable = False
        w.flags.writeable = False
        rule = _GH_CACHE[order] = GHRule(x, w)
    return rule


@dataclass(frozen=True)
class LaplaceGroupFit:
    mode: np.ndarray
    neg_hess: np.ndarray
    loglik_contrib: float
    converged: bool = True


@dataclass(frozen=True)
class LaplaceFits:
    """Laplace results for every group of a dataset."""

    modes: np.ndarray
    neg_hess: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray

    def group(self, i: int) -> LaplaceGroupFit:
        return LaplaceGroupFit(self.modes[i], self.neg_hess[i], float(self.loglik[i]), bool(self.converged[i]))


def _sigma_parts(Sigma):
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0 or not np.all(np.linalg.eigvalsh(Sigma) > 0):
        raise ValueError("Sigma must be symmetric positive definite")
    Sinv = np.linalg.inv(Sigma)
    return np.ascontiguousarray(0.5 * (Sinv + Sinv.T)), float(logdet)


def _as_packed(data) -> PackedData:
    if isinstance(data, PackedData):
        return data
    if isinstance(data, Group):
        return GroupedDataset([data]).packed()
    return data.packed()


def laplace_fits(data, beta, Sigma, u0=None) -> LaplaceFits:
    """Laplace approximation for every group (Newton with step halving)."""
    pk = _as_packed(data)
    Sinv, logdet = _sigma_parts(Sigma)
    d = pk.XR.shape[1]
    m = pk.m
    if u0 is None:
        u0 = np.zeros((m, d))
    modes = np.empty((m, d))
    ll = np.empty(m)
    negH = np.empty((m, d, d))
    ok = np.empty(m, dtype=np.bool_)
    _kernels.laplace_dataset(
        pk.y, pk.XF, pk.XR, pk.offsets, np.asarray(beta, dtype=float), Sinv, logdet,
        np.ascontiguousarray(u0, dtype=float), MAX_NEWTON, modes, ll, negH, ok,
    )
    if not ok.all():
        bad = np.flatnonzero(~ok)
        log.warning("Laplace mode search failed for %d group(s); falling back to u=0", bad.size)
        modes[bad] = 0.0
    return LaplaceFits(modes, negH, ll, ok)


def laplace_group(group: Group, beta, Sigma) -> LaplaceGroupFit:
    return laplace_fits(group, beta, Sigma).group(0)


def laplace_loglik(data, beta, Sigma) -> float:
    return float(np.sum(laplace_fits(data, beta, Sigma).loglik))


def _aghq(data, beta, Sigma, order: int, laplace: LaplaceFits | None = None):
    pk = _as_packed(data)
    d = pk.XR.shape[1]
    if d > 2:
        raise UnsupportedOracleDimension(f"quadrature oracle supports dR <= 2, got {d}")
    Sinv, logdet = _sigma_parts(Sigma)
    if laplace is None:
        laplace = laplace_fits(pk, beta, Sigma)
    rule = gh_rule(order)
    m = pk.m
    ll = np.empty(m)
    mean = np.empty((m, d))
    cov = np.empty((m, d, d))
    _kernels.aghq_dataset(
        pk.y, pk.XF, pk.XR, pk.offsets, np.asarray(beta, dtype=float), Sinv, logdet,
        laplace.modes, laplace.neg_hess, rule.nodes, rule.log_weights, ll, mean, cov,
    )
    return ll, mean, cov


def aghq_logliks(data, beta, Sigma, order: int = 100) -> np.ndarray:
    """Per-group log-likelihood contributions by adaptive Gauss-Hermite quadrature."""
    return _aghq(data, beta, Sigma, order)[0]


def aghq_group_loglik(group: Group, beta, Sigma, order: int = 100) -> float:
    return float(aghq_logliks(group, beta, Sigma, order)[0])


def aghq_loglik(data, beta, Sigma, order: int = 100) -> float:
    return float(np.sum(aghq_logliks(data, beta, Sigma, order)))


def aghq_posterior_moments(group: Group, beta, Sigma, order: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and covariance of ``u`` given the group's responses."""
    _, mean, cov = _aghq(group, beta, Sigma, order)
    return mean[0], cov[0]


def aghq_dataset_moments(data, beta, Sigma, order: int = 100):
    _, mean, cov = _aghq(data, beta, Sigma, order)
    return mean, cov


def lemma2_closed_forms(a: float, b) -> tuple[float, np.ndarray, np.ndarray]:
    """Integrals of ``Phi(a + b^T x)``, ``x Phi(.)`` and ``x x^T Phi(.)``
    against the standard ``d``-variate normal density."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    root = math.sqrt(b @ b + 1.0)
    z = a / root
    zeroth = float(_norm_cdf(z))
    first = b / root * _norm_pdf(z)
    second = zeroth * np.eye(b.size) - a * np.outer(b, b) / root**3 * _norm_pdf(z)
    return zeroth, first, second


def lemma2_group_loglik(group: Group, beta, Sigma) -> float:
    """Exact log-likelihood of a one-observation group."""
    if group.n != 1:
        raise ValueError("closed form applies to single-observation groups only")
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    s = group.signs[0]
    xR = group.xR[0]
    return float(_log_norm_cdf(s * (group.xF[0] @ np.asarray(beta, dtype=float)) / math.sqrt(xR @ Sigma @ xR + 1.0)))
