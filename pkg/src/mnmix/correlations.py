"""Inter-species abundance correlations implied by the fitted models.

The random effects give log-normal rates ``lambda ~ logN(mu, Sigma)``.
Abundance moments follow from the laws of total expectation, variance and
covariance. They are exact for the Poisson model. For the hurdle model a
second-order delta method is used about ``E(lambda)``. Autoregressive
variants substitute the previous year's abundance into the mean and
covariance of the log-rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .distributions import DomainError, lognormal_moment_vector

__all__ = [
    "CorrelationReport",
    "corr_from_sigma",
    "corr_mnm",
    "corr_hurdle",
    "corr_ar",
    "hurdle_mean_var",
    "correlation_report",
]


def _normalise(cov):
    d = np.sqrt(np.diag(cov))
    out = cov / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)


def corr_from_sigma(Sigma):
    """Correlation matrix of the latent random effects."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if not np.allclose(Sigma, Sigma.T):
        raise DomainError("Sigma must be symmetric")
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise DomainError("Sigma must be positive definite") from exc
    return _normalise(Sigma)


def corr_mnm(mu, Sigma):
    """Abundance correlations for Poisson abundances with log-normal rates.

    ``Var(N_s) = E(lambda_s) + Var(lambda_s)`` carries the Poisson term and
    ``Cov(N_s, N_s') = Cov(lambda_s, lambda_s')``.
    """
    E, var, cov = lognormal_moment_vector(mu, Sigma)
    cov = cov.copy()
    cov[np.diag_indices_from(cov)] = E + var
    return _normalise(cov)


def _hurdle_derivs(lam, theta):
    """Conditional mean ``m`` and variance ``v`` of the hurdle law with
    their first and second derivatives in ``lambda``."""
    lam = np.asarray(lam, dtype=float)
    e = np.exp(-lam)
    u = -np.expm1(-lam)
    w = 1.0 - theta
    # g = lam / u, the zero-truncated mean
    g = lam / u
    g1 = (u - lam * e) / u ** 2
    g2 = (lam * e * u - 2.0 * e * (u - lam * e)) / u ** 3
    # h = (lam + lam^2) / u, the zero-truncated second moment
    h = (lam + lam ** 2) / u
    n1 = (1.0 + 2.0 * lam) * u - (lam + lam ** 2) * e
    h1 = n1 / u ** 2
    n1p = 2.0 * u + (lam + lam ** 2) * e
    h2 = (n1p * u - 2.0 * n1 * e) / u ** 3
    m, m1, m2 = w * g, w * g1, w * g2
    v = w * h - m ** 2
    v2 = w * h2 - 2.0 * (m1 ** 2 + m * m2)
    return m, m1, m2, v, v2


def hurdle_mean_var(lam, theta):
    """Exact conditional mean and variance of a hurdle-Poisson count."""
    m, _, _, v, _ = _hurdle_derivs(lam, theta)
    return m, v


def corr_hurdle(mu, Sigma, theta):
    """Approximate abundance correlations under the hurdle model.

    With ``m(lambda)`` and ``v(lambda)`` the hurdle conditional mean and
    variance, expanded to second order about ``E(lambda)``:
    ``Var(N) ~ E[v] + m'^2 Var(lambda)`` and
    ``Cov(N_s, N_s') ~ m'_s m'_s' Cov(lambda_s, lambda_s')``.
    """
    if not 0.0 < theta < 1.0:
        raise DomainError("theta must lie in (0, 1)")
    E, var, cov = lognormal_moment_vector(mu, Sigma)
    _, m1, _, v, v2 = _hurdle_derivs(E, theta)
    Ev = v + 0.5 * v2 * var
    out = np.outer(m1, m1) * cov
    out[np.diag_indices_from(out)] = Ev + m1 ** 2 * var
    return _normalise(out)


def corr_ar(mu_a, Sigma_a, N_prev=None, k=0, x=None, mu_beta=None, Sigma_beta=None,
            mu_phi=None, Sigma_phi=None, hurdle=False, theta=None):
    """Abundance correlations at one site in year ``k`` (0-based).

    The previous year's abundance enters as a known regressor:
    ``mu = mu_a + x mu_beta + log(N_prev + 1) mu_phi`` and
    ``Sigma = Sigma_a + diag(x^2 Sigma_beta) + diag(log(N_prev + 1)^2 Sigma_phi)``.
    ``Sigma_beta`` and ``Sigma_phi`` are diagonal variances (vectors) and
    default to zero, i.e. fixed coefficients.
    """
    mu = np.asarray(mu_a, dtype=float).copy()
    Sigma = np.asarray(Sigma_a, dtype=float).copy()
    S = len(mu)
    if x is not None and mu_beta is not None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mb = np.asarray(mu_beta, dtype=float).reshape(S, -1)
        mu += mb @ x
        if Sigma_beta is not None:
            sb = np.asarray(Sigma_beta, dtype=float).reshape(S, -1)
            Sigma[np.diag_indices(S)] += sb @ (x ** 2)
    if k > 0:
        if N_prev is None:
            raise ValueError("years after the first need the previous abundances")
        lag = np.log1p(np.asarray(N_prev, dtype=float))
        if mu_phi is not None:
            mu += lag * np.asarray(mu_phi, dtype=float)
        if Sigma_phi is not None:
            Sigma[np.diag_indices(S)] += lag ** 2 * np.asarray(Sigma_phi, dtype=float)
    if hurdle:
        return corr_hurdle(mu, Sigma, theta)
    return corr_mnm(mu, Sigma)


@dataclass
class CorrelationReport:
    """Latent and abundance correlation matrices.

    ``abundance`` has shape ``(R, S, S)`` for the non-AR variants and
    ``(R, K, S, S)`` for the AR variants.
    """

    latent: np.ndarray
    abundance: np.ndarray
    method: str
    species: tuple = ()
    sites: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "method": self.method,
            "species": list(self.species),
            "sites": list(self.sites),
            "latent": self.latent.tolist(),
            "abundance": self.abundance.tolist(),
            "meta": self.meta,
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(latent=np.array(d["latent"]), abundance=np.array(d["abundance"]), method=d["method"],
                   species=tuple(d["species"]), sites=tuple(d["sites"]), meta=d.get("meta", {}))


def correlation_report(mu_a, Sigma_a, hurdle=False, autoregressive=False, theta=None, X=None,
                       beta=None, phi=None, N=None, Sigma_beta=None, Sigma_phi=None,
                       species=(), sites=(), R=None):
    """Correlation matrices for every site (and year for the AR variants).

    ``N`` (posterior-mean abundances, ``(R, K, S)``) is rounded and supplies
    the previous-year regressor for the AR variants. ``X`` and ``beta``
    add the site covariate term to the mean.
    """
    mu_a = np.asarray(mu_a, dtype=float)
    Sigma_a = np.asarray(Sigma_a, dtype=float)
    latent = corr_from_sigma(Sigma_a)
    if R is None:
        R = N.shape[0] if N is not None else (X.shape[0] if X is not None else 1)
    use_x = X is not None and beta is not None and np.size(beta) > 0

    def one(i, k, N_prev):
        return corr_ar(mu_a, Sigma_a, N_prev=N_prev, k=k,
                       x=X[i] if use_x else None, mu_beta=beta if use_x else None,
                       Sigma_beta=Sigma_beta, mu_phi=phi, Sigma_phi=Sigma_phi,
                       hurdle=hurdle, theta=theta)

    if autoregressive:
        if N is None:
            raise ValueError("autoregressive correlations need posterior abundances")
        Nr = np.rint(np.asarray(N, dtype=float))
        K = Nr.shape[1]
        mats = np.stack([np.stack([one(i, k, Nr[i, k - 1] if k else None) for k in range(K)])
                         for i in range(R)])
    else:
        mats = np.stack([one(i, 0, None) for i in range(R)])
    return CorrelationReport(latent=latent, abundance=mats, method="taylor" if hurdle else "exact",
                             species=tuple(species), sites=tuple(sites))
