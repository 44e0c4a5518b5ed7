import itertools
import math

import numpy as np
import pytest
from scipy.special import log_ndtr, roots_hermite

from probit_ep.ep import NaturalParams


def random_spd(rng, d, floor=0.3):
    W = rng.normal(size=(d, d))
    return W @ W.T / d + floor * np.eye(d)


def random_proper(rng, d) -> NaturalParams:
    """A proper unnormalised Gaussian message with moderate moments."""
    cov = random_spd(rng, d)
    mean = rng.normal(scale=0.8, size=d)
    return NaturalParams.from_gaussian(mean, cov, eta0=rng.normal())


def tilted_moments_gh(inp: NaturalParams, c0, c1, order=None):
    """Zeroth, first and second raw moments of ``Phi(c0 + c1^T x) f_inp(x)`` by
    a tensor Gauss-Hermite rule in whitened coordinates."""
    d = inp.dim
    order = order or {1: 400, 2: 200, 3: 70}[d]
    mean, cov = inp.moments()
    L = np.linalg.cholesky(cov)
    x, w = roots_hermite(order)
    grids = np.array(list(itertools.product(range(order), repeat=d)))
    Z = x[grids]
    with np.errstate(divide="ignore"):  # extreme weights underflow to 0 at high order
        logw = np.sum(np.log(w)[grids], axis=1)
    pts = mean + math.sqrt(2.0) * Z @ L.T
    logf = log_ndtr(c0 + pts @ np.asarray(c1, dtype=float))
    wt = np.exp(logw + logf - 0.5 * d * math.log(math.pi))
    # log of the Gaussian mass of f_inp
    A = inp.A
    sign, logdet = np.linalg.slogdet(-2.0 * A)
    log_mass = inp.eta0 + 0.5 * d * math.log(2 * math.pi) - 0.25 * inp.eta1 @ np.linalg.solve(A, inp.eta1) - 0.5 * logdet
    m0 = wt.sum()
    m1 = wt @ pts
    m2 = (pts * wt[:, None]).T @ pts
    return log_mass + math.log(m0), m1 / m0, m2 / m0


def message_moments(msg: NaturalParams):
    """(log zeroth, mean, second raw moment) of an unnormalised Gaussian message."""
    d = msg.dim
    mean, cov = msg.moments()
    A = msg.A
    sign, logdet = np.linalg.slogdet(-2.0 * A)
    log_mass = msg.eta0 + 0.5 * d * math.log(2 * math.pi) - 0.25 * msg.eta1 @ np.linalg.solve(A, msg.eta1) - 0.5 * logdet
    return log_mass, mean, cov + np.outer(mean, mean)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# --- acceptance summary --------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
