"""Expectation propagation for one group of a probit mixed model.

Messages are unnormalised Gaussians in exponential-family form

    f(x) = exp{eta0 + x^T eta1 + vech(x x^T)^T eta2}

and every site update is a closed-form Kullback-Leibler projection of
``Phi(c0 + c1^T x) * cavity(x)`` onto that family.  This module is the
readable reference path: it works literally with duplication matrices and
half-vectors.  ``_kernels`` holds the compiled batch version used inside the
optimiser, which is checked against this one in the test-suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Group
from .linalg import duplication_matrix, duplication_pinv, unvec, vec, vech_length
from .special import _log_norm_cdf, _zeta_all

LOG_2PI = math.log(2.0 * math.pi)


class ImproperMessageError(ArithmeticError):
    """A natural-parameter vector does not describe an integrable Gaussian."""


def quad_matrix(eta2: np.ndarray, d: int) -> np.ndarray:
    """``vec^{-1}(D_d^{+T} eta2)``: the matrix ``A`` with ``vech(xx^T)^T eta2 = x^T A x``."""
    A = unvec(duplication_pinv(d).T @ eta2, d)
    return 0.5 * (A + A.T)


def quad_vector(A: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quad_matrix`: ``D_d^T vec(A)``."""
    d = A.shape[0]
    return duplication_matrix(d).T @ vec(0.5 * (A + A.T))


def _neg_chol(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(-A)
    except np.linalg.LinAlgError:
        raise ImproperMessageError("quadratic coefficient matrix is not negative definite") from None


@dataclass
class NaturalParams:
    eta0: float
    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        self.eta0 = float(self.eta0)
        self.eta1 = np.asarray(self.eta1, dtype=float).reshape(-1)
        self.eta2 = np.asarray(self.eta2, dtype=float).reshape(-1)
        if self.eta2.size != vech_length(self.eta1.size):
            raise ValueError("eta2 length does not match eta1 dimension")

    @property
    def dim(self) -> int:
        return self.eta1.size

    @classmethod
    def zeros(cls, d: int) -> "NaturalParams":
        return cls(0.0, np.zeros(d), np.zeros(vech_length(d)))

    @classmethod
    def from_gaussian(cls, mean, cov, eta0: float = 0.0) -> "NaturalParams":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        prec = np.linalg.inv(np.atleast_2d(np.asarray(cov, dtype=float)))
        return cls(eta0, prec @ mean, quad_vector(-0.5 * prec))

    @classmethod
    def prior(cls, Sigma) -> "NaturalParams":
        """Message from the random-effect density ``N(0, Sigma)``."""
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        d = Sigma.shape[0]
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * Sigma)
        if sign <= 0:
            raise ImproperMessageError("Sigma is not positive definite")
        return cls(-0.5 * logdet, np.zeros(d), quad_vector(-0.5 * np.linalg.inv(Sigma)))

    @property
    def A(self) -> np.ndarray:
        return quad_matrix(self.eta2, self.dim)

    def is_proper(self) -> bool:
        try:
            _neg_chol(self.A)
        except ImproperMessageError:
            return False
        return np.isfinite(self.eta0)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the normalised density."""
        A = self.A
        _neg_chol(A)
        cov = -0.5 * np.linalg.inv(A)
        return cov @ self.eta1, cov

    def without_eta0(self) -> "NaturalParams":
        return replace(self, eta0=0.0)

    def __add__(self, other: "NaturalParams") -> "NaturalParams":
        return NaturalParams(self.eta0 + other.eta0, self.eta1 + other.eta1, self.eta2 + other.eta2)

    def __sub__(self, other: "NaturalParams") -> "NaturalParams":
        return NaturalParams(self.eta0 - other.eta0, self.eta1 - other.eta1, self.eta2 - other.eta2)

    def scaled(self, w: float) -> "NaturalParams":
        return NaturalParams(w * self.eta0, w * self.eta1, w * self.eta2)

    def copy(self) -> "NaturalParams":
        return NaturalParams(self.eta0, self.eta1.copy(), self.eta2.copy())


def a_n(eta1, eta2) -> float:
    """Log-normaliser: ``int exp(x^T eta1 + vech(xx^T)^T eta2) dx = (2 pi)^{d/2} exp(a_n)``."""
    eta1 = np.atleast_1d(np.asarray(eta1, dtype=float))
    A = quad_matrix(np.asarray(eta2, dtype=float), eta1.size)
    L = _neg_chol(A)
    # |-2A| = 2^d |-A|
    logdet = eta1.size * math.log(2.0) + 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.25 * eta1 @ np.linalg.solve(A, eta1) - 0.5 * logdet)


def _probit_radicals(a1, A2, c0, c1):
    _neg_chol(A2)
    A2inv_c1 = np.linalg.solve(A2, c1)
    r1 = math.sqrt(2.0 * (2.0 - c1 @ A2inv_c1))
    r2 = (2.0 * c0 - A2inv_c1 @ a1) / r1
    return r1, r2


def k_probit(a1, a2, c0: float, c1) -> tuple[np.ndarray, np.ndarray]:
    """Natural parameters ``(eta1*, eta2*)`` of the projection of
    ``Phi(c0 + c1^T x) exp(x^T a1 + vech(xx^T)^T a2)``."""
    a1 = np.atleast_1d(np.asarray(a1, dtype=float))
    c1 = np.atleast_1d(np.asarray(c1, dtype=float))
    d = a1.size
    A2 = quad_matrix(np.asarray(a2, dtype=float), d)
    r1, r2 = _probit_radicals(a1, A2, c0, c1)
    z1, z2 = _zeta_all(r2)
    r3 = 2.0 * z1 / r1
    r4 = -2.0 * z2 / r1**2
    try:
        R5 = np.linalg.solve(A2 + r4 * np.outer(c1, c1), A2)
    except np.linalg.LinAlgError:
        raise ImproperMessageError("singular matrix in site update") from None
    eta1 = R5.T @ (a1 + r3 * c1)
    eta2 = duplication_matrix(d).T @ vec(R5.T @ A2)
    return eta1, eta2


def c_probit(a1, a2, b1, b2, c0: float, c1) -> float:
    """Log zeroth-moment correction accompanying :func:`k_probit`."""
    a1 = np.atleast_1d(np.asarray(a1, dtype=float))
    b1 = np.atleast_1d(np.asarray(b1, dtype=float))
    c1 = np.atleast_1d(np.asarray(c1, dtype=float))
    d = a1.size
    A2 = quad_matrix(np.asarray(a2, dtype=float), d)
    B2 = quad_matrix(np.asarray(b2, dtype=float), d)
    _, r2 = _probit_radicals(a1, A2, c0, c1)
    _neg_chol(B2)
    _, logdet_a = np.linalg.slogdet(-A2)
    _, logdet_b = np.linalg.slogdet(-B2)
    return float(
        _log_norm_cdf(r2)
        + 0.25 * b1 @ np.linalg.solve(B2, b1)
        - 0.25 * a1 @ np.linalg.solve(A2, a1)
        + 0.5 * (logdet_b - logdet_a)
    )


def project_probit_site(inp: NaturalParams, c0: float, c1) -> NaturalParams:
    """Projection of ``Phi(c0 + c1^T x) * f_inp(x)`` onto unnormalised Gaussians."""
    eta1, eta2 = k_probit(inp.eta1, inp.eta2, c0, c1)
    eta0 = inp.eta0 + c_probit(inp.eta1, inp.eta2, eta1, eta2, c0, c1)
    return NaturalParams(eta0, eta1, eta2)


def site_constants(group: Group, beta) -> tuple[np.ndarray, np.ndarray]:
    """``c0_j = (2y_j - 1) beta^T xF_j`` and ``c1_j = (2y_j - 1) xR_j``."""
    s = group.signs
    return s * (group.xF @ np.asarray(beta, dtype=float)), s[:, None] * group.xR


def ep_start_site(y: float, xF, xR, beta, u_hat) -> NaturalParams:
    """Starting site from the quadratic Taylor expansion of ``log Phi`` at ``u_hat``."""
    xF = np.asarray(xF, dtype=float).reshape(-1)
    xR = np.asarray(xR, dtype=float).reshape(-1)
    u_hat = np.asarray(u_hat, dtype=float).reshape(-1)
    s = 2.0 * y - 1.0
    a_hat = s * (xF @ np.asarray(beta, dtype=float) + u_hat @ xR)
    z1, z2 = _zeta_all(a_hat)
    eta1 = s * z1 * xR - z2 * xR * (xR @ u_hat)
    eta2 = quad_vector(0.5 * z2 * np.outer(xR, xR))
    return NaturalParams(0.0, eta1, eta2)


@dataclass
class EPGroupState:
    site_messages: list[NaturalParams]
    prior_message: NaturalParams
    sum_sites: NaturalParams
    converged: bool = False
    iterations: int = 0
    skipped_updates: int = 0
    c0: np.ndarray = field(default=None, repr=False)
    c1: np.ndarray = field(default=None, repr=False)

    @property
    def n_sites(self) -> int:
        return len(self.site_messages)

    @property
    def posterior(self) -> NaturalParams:
        """``eta_Sigma + SUM`` of all site messages."""
        return self.prior_message + self.sum_sites

    def cavity(self, j: int) -> NaturalParams:
        return self.posterior - self.site_messages[j]

    def recomputed_sum(self) -> NaturalParams:
        total = NaturalParams.zeros(self.prior_message.dim)
        for site in self.site_messages:
            total = total + site
        return total


def _rel_change(new: NaturalParams, old: NaturalParams) -> float:
    old_v = np.concatenate([old.eta1, old.eta2])
    new_v = np.concatenate([new.eta1, new.eta2])
    return float(np.max(np.abs(new_v - old_v) / (1.0 + np.abs(old_v))))


def _update_site(cavity: NaturalParams, old: NaturalParams, c0, c1) -> NaturalParams | None:
    """New (eta1, eta2) for one site, with one damped retry; ``None`` means skip."""
    try:
        eta1, eta2 = k_probit(cavity.eta1, cavity.eta2, c0, c1)
    except ImproperMessageError:
        return None
    proposal = NaturalParams(0.0, eta1 - cavity.eta1, eta2 - cavity.eta2)
    for step in (1.0, 0.5):
        site = old.without_eta0() + (proposal - old.without_eta0()).scaled(step)
        site.eta0 = 0.0
        if (cavity.without_eta0() + site).is_proper():
            return site
    return None


def ep_group_loop(
    group: Group,
    beta,
    Sigma,
    start: list[NaturalParams] | None = None,
    tol: float = 1e-5,
    max_iter: int = 100,
    sweep: str = "fresh",
) -> EPGroupState:
    """Iterate the site updates of one group to their fixed point.

    ``sweep="fresh"`` refreshes the running site sum after every site update;
    ``sweep="literal"`` recomputes it once per cycle.  After the loop the
    zeroth-order coefficients of the sites are filled in from the final
    cavities.
    """
    if sweep not in ("fresh", "literal"):
        raise ValueError("sweep must be 'fresh' or 'literal'")
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    d = Sigma.shape[0]
    c0, c1 = site_constants(group, beta)
    if start is None:
        start = [ep_start_site(group.y[j], group.xF[j], group.xR[j], beta, np.zeros(d)) for j in range(group.n)]
    sites = [s.without_eta0() for s in start]
    prior = NaturalParams.prior(Sigma)
    state = EPGroupState(sites, prior, NaturalParams.zeros(d), c0=c0, c1=c1)
    state.sum_sites = state.recomputed_sum()

    for it in range(1, max_iter + 1):
        if sweep == "literal":
            state.sum_sites = state.recomputed_sum()
        frozen_sum = state.sum_sites
        delta = 0.0
        for j in range(group.n):
            old = state.site_messages[j]
            base = frozen_sum if sweep == "literal" else state.sum_sites
            cavity = prior + base - old
            new = _update_site(cavity, old, c0[j], c1[j])
            if new is None:
                state.skipped_updates += 1
                continue
            delta = max(delta, _rel_change(new, old))
            state.site_messages[j] = new
            if sweep == "fresh":
                state.sum_sites = state.sum_sites + (new - old)
        if sweep == "literal":
            state.sum_sites = state.recomputed_sum()
        state.iterations = it
        if delta < tol:
            state.converged = True
            break

    # refresh to remove accumulated rounding in the running sum
    state.sum_sites = state.recomputed_sum()
    cavities = [state.cavity(j) for j in range(group.n)]
    for j, cav in enumerate(cavities):
        site = state.site_messages[j]
        site.eta0 = c_probit(cav.eta1, cav.eta2, site.eta1 + cav.eta1, site.eta2 + cav.eta2, c0[j], c1[j])
    state.sum_sites = state.recomputed_sum()
    return state


def ep_group_loglik(state: EPGroupState) -> float:
    """EP approximation to the log-likelihood contribution of the group."""
    post = state.posterior
    try:
        an = a_n(post.eta1, post.eta2)
    except ImproperMessageError as exc:
        raise ImproperMessageError("degenerate fit point: posterior message is improper") from exc
    return 0.5 * post.dim * LOG_2PI + post.eta0 + an


def ep_best_predict(state: EPGroupState) -> tuple[np.ndarray, np.ndarray]:
    """Approximate conditional mean and covariance of the group's random effect."""
    post = state.posterior
    A = post.A
    _neg_chol(A)
    cov = -0.5 * np.linalg.inv(A)
    cov = 0.5 * (cov + cov.T)
    return cov @ post.eta1, cov


@dataclass(frozen=True)
class EPBatchResult:
    """Per-group output of the compiled EP loop."""

    loglik: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    skipped: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.loglik))


def ep_logliks(data, beta, Sigma, u_hat=None, tol: float = 1e-5, max_iter: int = 100,
               sweep: str = "fresh") -> EPBatchResult:
    """Run EP on every group of ``data`` (a ``GroupedDataset`` or ``PackedData``).

    ``u_hat`` (m x dR) are the random-effect predictions that seed the
    starting sites; zeros when omitted.
    """
    from . import _kernels
    from .data import PackedData

    if sweep not in ("fresh", "literal"):
        raise ValueError("sweep must be 'fresh' or 'literal'")
    pk = data if isinstance(data, PackedData) else data.packed()
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise ImproperMessageError("Sigma is not positive definite")
    Sinv = np.linalg.inv(Sigma)
    Sinv = np.ascontiguousarray(0.5 * (Sinv + Sinv.T))
    m, d = pk.m, pk.XR.shape[1]
    if u_hat is None:
        u_hat = np.zeros((m, d))
    ll = np.empty(m)
    conv = np.empty(m, dtype=np.bool_)
    iters = np.empty(m, dtype=np.int64)
    skipped = np.empty(m, dtype=np.int64)
    mean = np.empty((m, d))
    cov = np.empty((m, d, d))
    _kernels.ep_dataset(
        pk.y, pk.XF, pk.XR, pk.offsets, np.asarray(beta, dtype=float), Sinv, float(logdet),
        np.ascontiguousarray(u_hat, dtype=float), float(tol), int(max_iter), sweep == "literal",
        ll, conv, iters, skipped, mean, cov,
    )
    return EPBatchResult(ll, conv, iters, skipped, mean, cov)
