import numpy as np
import pytest
from scipy import special, stats

from mnmix.latent import enumerate_cells


def _brute(loglam, lp, Y, hurdle, theta, top=3000):
    """Direct per-cell sum over N in [0, top]."""
    R, T, K, S = Y.shape
    n = np.arange(top)
    lam = np.exp(loglam)
    out = np.empty((R, K, S))
    pmfs = {}
    for i in range(R):
        for k in range(K):
            for s in range(S):
                if hurdle:
                    prior = np.where(n == 0, np.log(theta),
                                     np.log1p(-theta) + stats.poisson.logpmf(n, lam[i, k, s])
                                     - np.log(-np.expm1(-lam[i, k, s])))
                else:
                    prior = stats.poisson.logpmf(n, lam[i, k, s])
                p = special.expit(np.broadcast_to(lp, Y.shape)[i, :, k, s])
                obs = stats.binom.logpmf(Y[i, :, k, s][:, None], n[None, :], p[:, None]).sum(axis=0)
                f = prior + obs
                out[i, k, s] = special.logsumexp(f)
                pmfs[i, k, s] = np.exp(f - out[i, k, s])
    return out, pmfs


@pytest.mark.parametrize("hurdle", [False, True])
def test_marginals_match_brute_force(hurdle):
    rng = np.random.default_rng(0)
    R, T, K, S = 3, 4, 2, 2
    loglam = rng.normal(2.0, 1.5, size=(R, K, S))
    lp = rng.normal(0.0, 1.0, size=(R, 1, K, S))
    N = rng.poisson(np.exp(loglam))
    if hurdle:
        N[rng.random(N.shape) < 0.4] = 0
    Y = rng.binomial(N[:, None], special.expit(lp))
    grid = enumerate_cells(loglam, lp, Y, hurdle, 0.4 if hurdle else None)
    exact, _ = _brute(loglam, lp, Y, hurdle, 0.4)
    assert np.allclose(grid.logm, exact, atol=1e-9)


def test_large_counts_and_many_occasions():
    loglam = np.log(np.array([[[3000.0]]]))
    lp = np.zeros((1, 1, 1, 1)) + 0.3
    Y = np.random.default_rng(1).binomial(3000, special.expit(0.3), size=(1, 60, 1, 1))
    grid = enumerate_cells(loglam, lp, Y)
    exact, _ = _brute(loglam, lp, Y, False, None, top=6000)
    assert grid.logm[0, 0, 0] == pytest.approx(exact[0, 0, 0], abs=1e-8)


def test_exact_sampling_distribution():
    loglam = np.log(np.array([[[6.0]]]))
    lp = np.zeros((1, 1, 1, 1))
    Y = np.array([3, 1]).reshape(1, 2, 1, 1)
    grid = enumerate_cells(loglam, lp, Y)
    _, pmfs = _brute(loglam, lp, Y, False, None, top=200)
    rng = np.random.default_rng(2)
    draws = np.array([grid.sample(rng)[0, 0, 0] for _ in range(40_000)])
    emp = np.bincount(draws, minlength=200)[:200] / len(draws)
    assert 0.5 * np.abs(emp - pmfs[0, 0, 0]).sum() < 0.02
    assert draws.min() >= 3


def test_hurdle_zero_state_only_for_all_zero_cells():
    loglam = np.zeros((1, 2, 1))
    Y = np.zeros((1, 2, 2, 1), dtype=int)
    Y[0, 1, 0, 0] = 1  # year 0 has a detection, year 1 has none
    grid = enumerate_cells(loglam, np.zeros((1, 1, 1, 1)), Y, hurdle=True, theta=0.5)
    rng = np.random.default_rng(3)
    d = np.array([grid.sample(rng)[0, :, 0] for _ in range(2000)])
    assert d[:, 0].min() >= 1
    assert np.any(d[:, 1] == 0)
