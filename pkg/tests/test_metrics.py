import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from mnmix.distributions import DomainError
from mnmix.metrics import (bic, ccc, cmd, coverage, mann_kendall, marginal_loglik, n_params,
                           relative_bias)
from mnmix.model import Dataset, ModelSpec, Parameters


def test_ccc_examples():
    assert ccc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-12)
    assert ccc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(2 * (2 / 3) / (2 / 3 + 2 / 3 + 1), abs=1e-12)
    assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(0.5714285714, abs=1e-9)
    with pytest.raises(DomainError):
        ccc([1, 1], [2, 2])


def test_cmd_examples():
    C = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert cmd(C, C) == pytest.approx(0.0, abs=1e-12)
    assert cmd(np.eye(2), np.ones((2, 2))) == pytest.approx(1 - 2 / (np.sqrt(2) * 2), abs=1e-12)
    assert cmd(np.eye(2), np.ones((2, 2))) == pytest.approx(0.29289321881, abs=1e-9)


def test_relative_bias_examples():
    assert relative_bias([2.0, 2.0], 2.0) == 0.0
    assert relative_bias([1.1], 1.0) == pytest.approx(0.1, abs=1e-12)
    assert relative_bias([0.8, 1.2], 1.0) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(DomainError):
        relative_bias([1.0], 0.0)


def test_coverage_examples():
    assert coverage([0, 0], [2, 2], 1) == 1.0
    assert coverage([0, 0], [0.5, 0.5], 1) == 0.0
    assert coverage([0, 2], [2, 3], 1) == 0.5


def test_coverage_calibrated_normal_posterior():
    # conjugate normal model: the 50% interval is exactly calibrated
    g = np.random.default_rng(0)
    truth = g.normal(size=100)
    y = truth + g.normal(size=100)
    post_mean, post_sd = y / 2, np.sqrt(0.5)
    lo, hi = stats.norm.ppf([0.25, 0.75], post_mean[:, None], post_sd).T
    assert coverage(lo, hi, truth) == pytest.approx(0.5, abs=0.15)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=30))
@settings(max_examples=50, deadline=None)
def test_ccc_bounded_and_symmetric(x):
    x = np.array(x)
    y = x[::-1] * 0.5 + 1
    if x.var() == 0 and y.var() == 0:
        return
    c = ccc(x, y)
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert c == pytest.approx(ccc(y, x))


def test_bic_examples():
    assert bic(-100.0, 5, 200) == pytest.approx(200 + 5 * np.log(200), abs=1e-12)
    assert bic(-100.0, 5, 200) == pytest.approx(226.4915868, abs=1e-6)
    assert bic(-10.0, 6, 50) > bic(-10.0, 5, 50)
    with pytest.raises(ValueError):
        bic(0.0, 1, 0)


@pytest.mark.parametrize("spec, q, expected", [
    (ModelSpec(detection_dim="C"), 0, 75),
    (ModelSpec(detection_dim="A"), 0, 9465),
    (ModelSpec(detection_dim="B"), 0, 1005),
    (ModelSpec(detection_dim="C", autoregressive=True), 0, 77),
    (ModelSpec(detection_dim="C", hurdle=True), 0, 76),
    (ModelSpec(detection_dim="A", hurdle=True), 0, 9466),
    (ModelSpec(detection_dim="C"), 3, 81),
    (ModelSpec(detection_dim="A"), 3, 9471),
    (ModelSpec(detection_dim="C", hurdle=True), 3, 82),
])
def test_parameter_counts_table(spec, q, expected):
    assert n_params(spec, R=94, K=10, S=10, q_lambda=q) == expected


def _one_cell(Y, a=0.0, lp=0.0):
    data = Dataset(Y=np.asarray(Y).reshape(1, -1, 1, 1))
    point = Parameters(a=np.array([[a]]), mu_a=np.array([a]), Sigma_a=np.eye(1), logit_p=np.array([lp]))
    return data, point


def test_marginal_loglik_closed_form():
    data, point = _one_cell([0])
    for tail in (1e-6, 1e-10, 1e-14):
        assert marginal_loglik(data, ModelSpec(), point, tail=tail) == pytest.approx(-0.5, abs=1e-9)


def test_marginal_loglik_upper_bound_below_max_count():
    # the latent quantile falls below the observed count; summation starts at max Y
    data, point = _one_cell([40, 38], a=0.0, lp=2.0)
    ll = marginal_loglik(data, ModelSpec(), point)
    n = np.arange(40, 400)
    ref = special.logsumexp(stats.poisson.logpmf(n, 1.0) + stats.binom.logpmf(40, n, special.expit(2.0))
                            + stats.binom.logpmf(38, n, special.expit(2.0)))
    assert ll == pytest.approx(ref, abs=1e-8)


def _cell_lik(y, a, p):
    n = np.arange(max(y), 500)
    return np.exp(special.logsumexp(stats.poisson.logpmf(n, np.exp(a))
                                    + stats.binom.logpmf(np.array(y)[:, None], n, p).sum(axis=0)))


def test_integrated_likelihood_matches_quadrature():
    Y = [[4, 2, 3], [0, 1, 0]]
    data = Dataset(Y=np.array(Y).reshape(2, 3, 1, 1))
    mu, var, p = 1.2, 0.4, 0.6
    point = Parameters(a=np.zeros((2, 1)), mu_a=np.array([mu]), Sigma_a=np.array([[var]]),
                       logit_p=np.array([special.logit(p)]))
    ref = 0.0
    for y in Y:
        f = lambda a: _cell_lik(y, a, p) * stats.norm.pdf(a, mu, np.sqrt(var))
        ref += np.log(integrate.quad(f, mu - 8, mu + 8, limit=200)[0])
    # posterior-like draws for the proposal
    g = np.random.default_rng(1)
    a_draws = np.stack([g.normal(1.6, 0.4, 500), g.normal(0.2, 0.6, 500)], axis=1)[:, :, None]
    ll = marginal_loglik(data, ModelSpec(), point, mode="integrated", a_draws=a_draws,
                         n_importance=40_000, rng=g)
    assert ll == pytest.approx(ref, abs=0.02)


def test_ar_likelihood_reduces_to_plain_when_phi_zero():
    g = np.random.default_rng(2)
    Y = g.integers(0, 5, size=(3, 2, 3, 2))
    data = Dataset(Y=Y)
    point = Parameters(a=g.normal(1, 0.3, (3, 2)), mu_a=np.ones(2), Sigma_a=np.eye(2),
                       logit_p=np.zeros(2), phi=np.zeros(2))
    plain = marginal_loglik(data, ModelSpec(), point)
    ar = marginal_loglik(data, ModelSpec(autoregressive=True), point)
    assert ar == pytest.approx(plain, abs=1e-8)


def test_ar_likelihood_brute_force():
    # two years, one cell: sum over (N1, N2) directly
    Y = np.array([[3, 1], [5, 4]]).T.reshape(1, 2, 2, 1)  # occasions x years
    data = Dataset(Y=Y)
    a, phi, p = 1.0, 0.3, 0.55
    point = Parameters(a=np.array([[a]]), mu_a=np.array([a]), Sigma_a=np.eye(1),
                       logit_p=np.array([special.logit(p)]), phi=np.array([phi]))
    n = np.arange(0, 150)
    l1 = stats.poisson.logpmf(n, np.exp(a)) + stats.binom.logpmf(Y[0, :, 0, 0][:, None], n, p).sum(0)
    lam2 = np.exp(a + phi * np.log1p(n))
    l2 = stats.poisson.logpmf(n[None, :], lam2[:, None]) + stats.binom.logpmf(
        Y[0, :, 1, 0][:, None], n, p).sum(0)[None, :]
    ref = special.logsumexp(l1[:, None] + l2)
    assert marginal_loglik(data, ModelSpec(autoregressive=True), point) == pytest.approx(ref, abs=1e-8)


def test_mann_kendall_examples():
    r = mann_kendall([1, 2, 3, 4, 5])
    assert (r.S, r.tau) == (10, 1.0)
    c = mann_kendall([4, 4, 4, 4])
    assert (c.S, c.tau) == (0, 0.0)


def test_mann_kendall_ten_year_series():
    x = np.array([9, 0, 1, 2, 3, 4, 5, 6, 7, 8], dtype=float)
    r = mann_kendall(x)
    assert r.S == 27 and r.tau == pytest.approx(0.6, abs=1e-12)
    assert r.var_S == pytest.approx(125.0)
    oracle = stats.kendalltau(np.arange(10), x, alternative="greater", method="exact").pvalue
    assert r.p == pytest.approx(oracle, abs=1e-12)
    assert abs(r.p - 0.0082) <= 0.001
    normal = mann_kendall(x, method="normal")
    assert normal.p == pytest.approx(stats.norm.sf(26 / np.sqrt(125)), abs=1e-12)


@given(st.lists(st.integers(-20, 20), min_size=3, max_size=8))
@settings(max_examples=60, deadline=None)
def test_mann_kendall_statistic_matches_pairs(x):
    r = mann_kendall(x)
    n = len(x)
    S = sum(np.sign(x[j] - x[i]) for i in range(n) for j in range(i + 1, n))
    assert r.S == S
    assert 0.0 <= r.p <= 1.0
    assert mann_kendall(x[::-1]).S == -S


def test_mann_kendall_exact_with_ties_small():
    x = [1, 2, 2, 3, 5]
    r = mann_kendall(x, method="exact")
    perm_p = np.mean([mann_kendall(list(q)).S >= r.S for q in __import__("itertools").permutations(x)])
    assert r.p == pytest.approx(perm_p)


def test_mann_kendall_rejects_short():
    with pytest.raises(ValueError):
        mann_kendall([1, 2])


def test_ar_likelihood_counts_in_latent_tail():
    Y = np.array([[30, 28], [2, 1]]).T.reshape(1, 2, 2, 1)
    data = Dataset(Y=Y)
    a, phi, p = 0.0, 0.2, 0.8
    point = Parameters(a=np.array([[a]]), mu_a=np.array([a]), Sigma_a=np.eye(1),
                       logit_p=np.array([special.logit(p)]), phi=np.array([phi]))
    n = np.arange(0, 300)
    l1 = stats.poisson.logpmf(n, np.exp(a)) + stats.binom.logpmf(Y[0, :, 0, 0][:, None], n, p).sum(0)
    lam2 = np.exp(a + phi * np.log1p(n))
    l2 = stats.poisson.logpmf(n[None, :], lam2[:, None]) + stats.binom.logpmf(
        Y[0, :, 1, 0][:, None], n, p).sum(0)[None, :]
    ref = special.logsumexp(l1[:, None] + l2)
    assert marginal_loglik(data, ModelSpec(autoregressive=True), point) == pytest.approx(ref, abs=1e-8)
