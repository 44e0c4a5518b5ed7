import math

import numpy as np
import pytest
from conftest import message_moments, random_proper, random_spd, tilted_moments_gh
from textbook_ep import textbook_ep_loglik

from probit_ep.data import Group, GroupedDataset
from probit_ep.ep import (
    ImproperMessageError,
    NaturalParams,
    a_n,
    c_probit,
    ep_best_predict,
    ep_group_loglik,
    ep_group_loop,
    ep_logliks,
    ep_start_site,
    k_probit,
    project_probit_site,
    quad_matrix,
    quad_vector,
)
from probit_ep.linalg import vech
from probit_ep.oracles import lemma2_group_loglik


def random_group(rng, n, dF, dR, beta=None):
    X = np.ones((n, dF))
    X[:, 1:] = rng.uniform(size=(n, dF - 1))
    y = (rng.uniform(size=n) < 0.5).astype(float)
    return Group(y=y, xF=X, xR=X[:, :dR].copy())


# --- messages ------------------------------------------------------------

def test_quad_matrix_round_trip(rng):
    for d in (1, 2, 3):
        A = random_spd(rng, d)
        np.testing.assert_allclose(quad_matrix(quad_vector(A), d), A, atol=1e-15)
        x = rng.normal(size=d)
        # vech(xx^T)^T eta2 == x^T A x
        assert vech(np.outer(x, x)) @ quad_vector(A) == pytest.approx(x @ A @ x, rel=1e-13)


def test_prior_message_is_normalised(rng):
    for d in (1, 2, 3):
        log_mass, mean, second = message_moments(NaturalParams.prior(random_spd(rng, d)))
        assert log_mass == pytest.approx(0.0, abs=1e-13)
        np.testing.assert_allclose(mean, 0.0, atol=1e-15)


def test_from_gaussian_moments(rng):
    mean = np.array([0.3, -1.0])
    cov = np.array([[1.0, 0.4], [0.4, 2.0]])
    m, S = NaturalParams.from_gaussian(mean, cov).moments()
    np.testing.assert_allclose(m, mean, rtol=1e-14)
    np.testing.assert_allclose(S, cov, rtol=1e-14)


def test_a_n_matches_brute_force():
    # 1-d: int exp(a x^2 + b x) dx = sqrt(pi/-a) exp(-b^2/(4a))
    a, b = -0.7, 0.4
    lhs = 0.5 * math.log(2 * math.pi) + a_n([b], [a])
    assert lhs == pytest.approx(0.5 * math.log(math.pi / -a) - b * b / (4 * a), rel=1e-14)


def test_improper_raises():
    with pytest.raises(ImproperMessageError):
        a_n([0.0], [0.5])
    with pytest.raises(ImproperMessageError):
        k_probit([0.0], [0.1], 0.0, [1.0])
    assert not NaturalParams(0.0, [0.0], [0.2]).is_proper()


# --- projection ----------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2, 3])
def test_projection_matches_quadrature(d, rng):
    for _ in range(4):
        inp = random_proper(rng, d)
        c0 = rng.normal()
        c1 = rng.normal(scale=0.7, size=d)
        out = project_probit_site(inp, c0, c1)
        l0, m1, m2 = tilted_moments_gh(inp, c0, c1)
        p0, p1, p2 = message_moments(out)
        assert p0 == pytest.approx(l0, abs=1e-9)
        np.testing.assert_allclose(p1, m1, rtol=1e-8, atol=1e-9)
        np.testing.assert_allclose(p2, m2, rtol=1e-8, atol=1e-9)


def test_skew_normal_anchor():
    # Phi(x) N(x; 0, 1): mean sqrt(1/pi), variance 1 - 1/pi
    eta1, eta2 = k_probit([0.0], [-0.5], 0.0, [1.0])
    var = 1 - 1 / math.pi
    assert eta2[0] == pytest.approx(-1 / (2 * var), abs=1e-12)
    assert eta1[0] / (-2 * eta2[0]) == pytest.approx(math.sqrt(1 / math.pi), abs=1e-12)


def test_zero_slope_site_is_a_constant(rng):
    inp = random_proper(rng, 2)
    out = project_probit_site(inp, 0.8, np.zeros(2))
    np.testing.assert_allclose(out.eta1, inp.eta1, rtol=1e-14)
    np.testing.assert_allclose(out.eta2, inp.eta2, rtol=1e-14)
    assert out.eta0 - inp.eta0 == pytest.approx(math.log(0.7881446014166034), rel=1e-14)


def test_c_probit_is_zeroth_moment_correction(rng):
    inp = random_proper(rng, 2).without_eta0()
    c0, c1 = 0.3, np.array([0.5, -1.0])
    b1, b2 = k_probit(inp.eta1, inp.eta2, c0, c1)
    C = c_probit(inp.eta1, inp.eta2, b1, b2, c0, c1)
    l0, _, _ = tilted_moments_gh(inp, c0, c1)
    assert message_moments(NaturalParams(C, b1, b2))[0] == pytest.approx(l0, abs=1e-10)


# --- group loop ----------------------------------------------------------

@pytest.mark.parametrize("dR", [1, 2])
def test_single_observation_group_is_exact(dR, rng):
    for _ in range(20):
        g = random_group(rng, 1, 3, dR)
        beta = rng.normal(size=3)
        Sigma = random_spd(rng, dR)
        state = ep_group_loop(g, beta, Sigma, tol=1e-12)
        assert ep_group_loglik(state) == pytest.approx(lemma2_group_loglik(g, beta, Sigma), abs=1e-12)


@pytest.mark.parametrize("dR", [1, 2])
def test_agrees_with_textbook_ep(dR, rng):
    for n in (2, 5, 12):
        g = random_group(rng, n, 3, dR)
        beta = rng.normal(size=3)
        Sigma = random_spd(rng, dR)
        state = ep_group_loop(g, beta, Sigma, tol=1e-13, max_iter=500)
        mu0 = g.xF @ beta
        K = g.xR @ Sigma @ g.xR.T
        ref = textbook_ep_loglik(mu0, K, g.signs)
        assert ep_group_loglik(state) == pytest.approx(ref, abs=1e-9)


def test_sweep_modes_share_the_fixed_point(rng):
    g = random_group(rng, 10, 3, 2)
    beta, Sigma = rng.normal(size=3), random_spd(rng, 2)
    a = ep_group_loop(g, beta, Sigma, tol=1e-12, sweep="fresh")
    b = ep_group_loop(g, beta, Sigma, tol=1e-12, sweep="literal", max_iter=1000)
    assert a.converged and b.converged
    assert ep_group_loglik(a) == pytest.approx(ep_group_loglik(b), abs=1e-10)
    with pytest.raises(ValueError):
        ep_group_loop(g, beta, Sigma, sweep="backwards")


def test_running_sum_matches_recomputed(rng):
    g = random_group(rng, 15, 2, 1)
    state = ep_group_loop(g, [0.2, 0.5], [[1.3]], tol=1e-10)
    total = state.recomputed_sum()
    np.testing.assert_allclose(state.sum_sites.eta1, total.eta1, rtol=1e-13)
    np.testing.assert_allclose(state.sum_sites.eta2, total.eta2, rtol=1e-13)


def test_observation_order_does_not_matter(rng):
    g = random_group(rng, 9, 3, 2)
    beta, Sigma = rng.normal(size=3), random_spd(rng, 2)
    perm = rng.permutation(g.n)
    h = Group(y=g.y[perm], xF=g.xF[perm], xR=g.xR[perm])
    a = ep_group_loglik(ep_group_loop(g, beta, Sigma, tol=1e-12))
    b = ep_group_loglik(ep_group_loop(h, beta, Sigma, tol=1e-12))
    assert a == pytest.approx(b, abs=1e-10)


def test_best_prediction_is_posterior_moments(rng):
    g = random_group(rng, 6, 2, 1)
    state = ep_group_loop(g, [0.1, -0.3], [[0.8]], tol=1e-12)
    mean, cov = ep_best_predict(state)
    m2, c2 = state.posterior.moments()
    np.testing.assert_allclose(mean, m2)
    np.testing.assert_allclose(cov, c2)
    assert cov[0, 0] < 0.8


def test_start_site_is_taylor_expansion():
    from probit_ep.special import log_phi_cdf

    site = ep_start_site(1.0, [1.0, 0.5], [1.0], [0.2, 0.4], [0.3])
    # quadratic in u matching log Phi(0.2 + 0.2 + u) to second order at u = 0.3
    f = lambda u: log_phi_cdf(0.4 + u)
    h = 1e-4
    g1 = (f(0.3 + h) - f(0.3 - h)) / (2 * h)
    g2 = (f(0.3 + h) - 2 * f(0.3) + f(0.3 - h)) / h**2
    q = site.eta2[0]
    assert 2 * q == pytest.approx(g2, rel=1e-5)
    assert site.eta1[0] + 2 * q * 0.3 == pytest.approx(g1, rel=1e-7)


# --- compiled batch path -------------------------------------------------

@pytest.mark.parametrize("dR", [1, 2, 3])
@pytest.mark.parametrize("sweep", ["fresh", "literal"])
def test_batch_kernel_matches_reference(dR, sweep, rng):
    groups = [random_group(rng, int(rng.integers(1, 12)), 4, dR) for _ in range(12)]
    for k, g in enumerate(groups):
        object.__setattr__(g, "label", str(k))
    data = GroupedDataset(groups)
    beta = rng.normal(scale=0.7, size=4)
    Sigma = random_spd(rng, dR)
    uhat = rng.normal(scale=0.3, size=(data.m, dR))
    res = ep_logliks(data, beta, Sigma, uhat, tol=1e-9, sweep=sweep)
    assert res.converged.all()
    for i, g in enumerate(groups):
        start = [ep_start_site(g.y[j], g.xF[j], g.xR[j], beta, uhat[i]) for j in range(g.n)]
        state = ep_group_loop(g, beta, Sigma, start=start, tol=1e-9, sweep=sweep)
        assert res.loglik[i] == pytest.approx(ep_group_loglik(state), abs=1e-11)
        assert res.iterations[i] == state.iterations
        mean, cov = ep_best_predict(state)
        np.testing.assert_allclose(res.mean[i], mean, atol=1e-11)
        np.testing.assert_allclose(res.cov[i], cov, atol=1e-11)


def test_batch_rejects_bad_sigma():
    g = Group(y=np.array([1.0]), xF=np.ones((1, 1)), xR=np.ones((1, 1)))
    with pytest.raises(ImproperMessageError):
        ep_logliks(GroupedDataset([g]), [0.0], [[-1.0]])
