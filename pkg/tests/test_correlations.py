import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mnmix.correlations import (CorrelationReport, corr_ar, corr_from_sigma, corr_hurdle, corr_mnm,
                                correlation_report, hurdle_mean_var)
from mnmix.distributions import DomainError, rhurdle_poisson


def mc_corr(mu, Sigma, n, seed, theta=None):
    g = np.random.default_rng(seed)
    lam = np.exp(g.multivariate_normal(mu, Sigma, size=n))
    N = g.poisson(lam) if theta is None else rhurdle_poisson(lam, theta, g)
    return np.corrcoef(N.T)


def test_latent_correlation_examples():
    assert np.array_equal(corr_from_sigma(np.eye(3)), np.eye(3))
    assert corr_from_sigma([[4.0, 2.0], [2.0, 4.0]])[0, 1] == pytest.approx(0.5)
    assert np.array_equal(corr_from_sigma(np.diag([1.0, 9.0])), np.eye(2))
    with pytest.raises(DomainError):
        corr_from_sigma([[1.0, 2.0], [2.0, 1.0]])


def test_mnm_example():
    S = np.array([[1.0, 0.5], [0.5, 1.0]])
    E = np.exp(0.5)
    var = E + E ** 2 * np.expm1(1.0)
    cov = E ** 2 * np.expm1(0.5)
    assert var == pytest.approx(6.31949, abs=1e-5)
    assert cov == pytest.approx(2.71828 * 0.64872, abs=1e-4)
    rho = corr_mnm([0.0, 0.0], S)
    assert rho[0, 1] == pytest.approx(cov / var, abs=1e-12)
    assert rho[0, 1] == pytest.approx(0.27906, abs=1e-4)
    assert np.allclose(corr_mnm([0.0, 0.0], np.eye(2)), np.eye(2))


def test_mnm_monte_carlo_small():
    mu, S = np.array([1.0, 0.5]), np.array([[0.4, -0.25], [-0.25, 0.6]])
    assert corr_mnm(mu, S)[0, 1] == pytest.approx(mc_corr(mu, S, 10**6, 1)[0, 1], abs=0.01)


def test_hurdle_matches_mnm_when_theta_small_and_lambda_large():
    mu, S = np.array([3.0, 3.0]), np.array([[0.2, 0.1], [0.1, 0.2]])
    assert corr_hurdle(mu, S, 1e-6)[0, 1] == pytest.approx(corr_mnm(mu, S)[0, 1], abs=0.02)
    assert corr_hurdle(mu, S, 1e-6)[0, 1] == pytest.approx(mc_corr(mu, S, 10**6, 2)[0, 1], abs=0.02)


def test_hurdle_zero_offdiagonal():
    assert np.allclose(corr_hurdle([1.0, 2.0], np.diag([0.5, 0.3]), 0.4), np.eye(2))


def test_hurdle_example_monte_carlo_small():
    mu, S = np.array([1.0, 1.0]), np.array([[0.5, 0.2], [0.2, 0.5]])
    assert corr_hurdle(mu, S, 0.3)[0, 1] == pytest.approx(mc_corr(mu, S, 10**6, 3, theta=0.3)[0, 1], abs=0.05)


def test_hurdle_moments_exact():
    g = np.random.default_rng(4)
    x = rhurdle_poisson(np.full(10**6, 2.5), 0.3, g)
    m, v = hurdle_mean_var(2.5, 0.3)
    assert x.mean() == pytest.approx(m, abs=0.01)
    assert x.var() == pytest.approx(v, rel=0.01)


def test_hurdle_theta_domain():
    with pytest.raises(DomainError):
        corr_hurdle([0.0], [[1.0]], 1.0)


def test_ar_first_year_equals_mnm():
    mu, S = np.array([0.5, 1.5]), np.array([[0.6, 0.2], [0.2, 0.4]])
    assert np.array_equal(corr_ar(mu, S, k=0, mu_phi=[0.3, 0.3], Sigma_phi=[0.1, 0.1]), corr_mnm(mu, S))


def test_ar_zero_phi_constant_over_years():
    mu, S = np.array([0.5, 1.5]), np.array([[0.6, 0.2], [0.2, 0.4]])
    base = corr_ar(mu, S, k=0)
    for k, prev in enumerate([[3, 10], [0, 0], [50, 7]], start=1):
        assert np.allclose(corr_ar(mu, S, N_prev=prev, k=k, mu_phi=[0, 0], Sigma_phi=[0, 0]), base)


def test_ar_needs_previous_abundance():
    with pytest.raises(ValueError):
        corr_ar([0.0, 0.0], np.eye(2), k=1)


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_ar_sign_constant(seed):
    g = np.random.default_rng(seed)
    A = g.normal(size=(3, 3))
    S = 0.3 * (A @ A.T) / 3 + 0.05 * np.eye(3)
    mu = g.uniform(0, 3, 3)
    phi = g.normal(0, 0.3, 3)
    base = np.sign(np.round(corr_ar(mu, S, k=0), 12))
    for k in range(1, 5):
        prev = g.integers(0, 60, 3)
        r = corr_ar(mu, S, N_prev=prev, k=k, mu_phi=phi, Sigma_phi=np.full(3, 0.04))
        assert np.array_equal(np.sign(np.round(r, 12)), base)


@given(st.lists(st.floats(-1, 2), min_size=3, max_size=3), st.floats(0.1, 0.8), st.floats(0.05, 0.95))
@settings(max_examples=30, deadline=None)
def test_matrices_are_valid_correlations(mu, var, theta):
    S = var * np.array([[1, 0.3, -0.2], [0.3, 1, 0.1], [-0.2, 0.1, 1]])
    for r in (corr_mnm(mu, S), corr_hurdle(mu, S, theta)):
        assert np.allclose(r, r.T)
        assert np.allclose(np.diag(r), 1.0)
        assert np.all(np.abs(r) <= 1.0)


def test_report_shapes_and_json():
    mu, S = np.zeros(2), np.array([[0.5, 0.1], [0.1, 0.5]])
    rep = correlation_report(mu, S, R=3, species=("x", "y"))
    assert rep.abundance.shape == (3, 2, 2)
    N = np.ones((3, 4, 2))
    rep_ar = correlation_report(mu, S, autoregressive=True, phi=np.array([0.1, 0.2]), N=N)
    assert rep_ar.abundance.shape == (3, 4, 2, 2)
    back = CorrelationReport.from_json(rep.to_json())
    assert np.allclose(back.abundance, rep.abundance)
    assert back.species == ("x", "y")
