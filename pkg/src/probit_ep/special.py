"""Stable scalar special functions for the probit link.

``zeta(x) = log(2 Phi(x))``; its first derivative is the inverse Mills ratio
``phi(x)/Phi(x)`` and its second derivative is ``-zeta1(x) (x + zeta1(x))``.

Below ``MILLS_CROSSOVER`` the inverse Mills ratio comes from a continued
fraction evaluated with the modified Lentz algorithm; above it, from ``erfc``.
The ``_``-prefixed functions are numba kernels shared with the compiled EP
and quadrature code; the public wrappers validate their argument.
"""

from __future__ import annotations

import math

import numba

MILLS_CROSSOVER = -5.0

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_TINY = 1e-300


@numba.njit(cache=True)
def _norm_pdf(x):
    return math.exp(-0.5 * x * x - _LOG_SQRT_2PI)


@numba.njit(cache=True)
def _norm_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@numba.njit(cache=True)
def _mills_tail(t):
    """h(t) = t + 2/(t + 3/(t + 4/(t + ...))) by modified Lentz, for t > 0.

    The Mills ratio is Phi(-t)/phi(t) = 1/(t + 1/h(t)).
    """
    f = t
    C = f
    D = 0.0
    for k in range(2, 2000):
        D = t + k * D
        if D == 0.0:
            D = _TINY
        C = t + k / C
        if C == 0.0:
            C = _TINY
        D = 1.0 / D
        delta = C * D
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return f


@numba.njit(cache=True)
def _log_norm_cdf(x):
    if x >= MILLS_CROSSOVER:
        if x > 0.0:
            return math.log1p(-0.5 * math.erfc(x / _SQRT2))
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    t = -x
    # Phi(x) = phi(x) / (t + 1/h(t))
    return -0.5 * x * x - _LOG_SQRT_2PI - math.log(t + 1.0 / _mills_tail(t))


@numba.njit(cache=True)
def _zeta(x):
    return math.log(2.0) + _log_norm_cdf(x)


@numba.njit(cache=True)
def _zeta1(x):
    if x >= MILLS_CROSSOVER:
        return _norm_pdf(x) / _norm_cdf(x)
    t = -x
    return t + 1.0 / _mills_tail(t)


@numba.njit(cache=True)
def _zeta2(x):
    if x >= MILLS_CROSSOVER:
        z1 = _norm_pdf(x) / _norm_cdf(x)
        return -z1 * (x + z1)
    t = -x
    k = 1.0 / _mills_tail(t)
    # x + zeta1(x) == k exactly in this branch, no cancellation
    return -(t + k) * k


@numba.njit(cache=True)
def _zeta_all(x):
    """(zeta1, zeta2) sharing one evaluation."""
    if x >= MILLS_CROSSOVER:
        z1 = _norm_pdf(x) / _norm_cdf(x)
        return z1, -z1 * (x + z1)
    t = -x
    k = 1.0 / _mills_tail(t)
    return t + k, -(t + k) * k


def _check(x) -> float:
    x = float(x)
    if math.isnan(x):
        raise ValueError("argument is NaN")
    return x


def std_normal_pdf(x: float) -> float:
    return float(_norm_pdf(_check(x)))


def std_normal_cdf(x: float) -> float:
    """Standard normal distribution function ``Phi(x)``."""
    return float(_norm_cdf(_check(x)))


def log_phi_cdf(x: float) -> float:
    """``log Phi(x)``, finite for all finite ``x``."""
    return float(_log_norm_cdf(_check(x)))


def zeta(x: float) -> float:
    return float(_zeta(_check(x)))


def zeta1(x: float) -> float:
    """Inverse Mills ratio ``phi(x)/Phi(x)``."""
    return float(_zeta1(_check(x)))


def zeta2(x: float) -> float:
    return float(_zeta2(_check(x)))


def std_normal_ppf(p: float) -> float:
    """Standard normal quantile."""
    from scipy.special import ndtri

    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    return float(ndtri(p))
