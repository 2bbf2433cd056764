"""Evaluation and model-comparison statistics.

Agreement measures for the simulation study (CCC, CMD, relative bias,
interval coverage), the observed-data likelihood behind BIC, and the
Mann-Kendall trend test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special, stats

from .distributions import DomainError, rmvnormal
from .latent import _mode_and_sd, enumerate_cells
from .model import Dataset, ModelSpec, Parameters, latent_logpmf_cells, log_lambda, logit_p

__all__ = [
    "ccc",
    "cmd",
    "relative_bias",
    "coverage",
    "marginal_loglik",
    "bic",
    "n_params",
    "posterior_point",
    "model_bic",
    "MannKendall",
    "mann_kendall",
    "StudyMetricRow",
    "STUDY_COLUMNS",
]


# column order of the standard study tables, then the extra bookkeeping
STUDY_COLUMNS = (
    "median_p", "median_lambda", "theta", "ccc", "cmd", "rb_p", "rb_mu_a", "rb_theta", "rb_phi",
    "model", "scenario", "replicates", "failures",
    "cov_Sigma_a", "cov_p", "cov_mu_a", "cov_theta", "cov_phi", "flagged",
)


@dataclass
class StudyMetricRow:
    """Per-scenario means of the simulation-study metrics.

    Optional entries are ``None`` when the model has no such parameter.
    ``flagged`` lists blocks whose estimates are unreliable: some replicate
    had an R-hat at or above the threshold, or the mean relative bias
    exceeds 1.
    """

    median_p: float
    median_lambda: float
    theta: float | None
    ccc: float
    cmd: float
    rb_p: float
    rb_mu_a: float
    rb_theta: float | None = None
    rb_phi: float | None = None
    model: str = ""
    scenario: str = ""
    replicates: int = 0
    failures: int = 0
    cov_Sigma_a: float | None = None
    cov_p: float | None = None
    cov_mu_a: float | None = None
    cov_theta: float | None = None
    cov_phi: float | None = None
    flagged: tuple = ()

    def to_dict(self):
        return {c: getattr(self, c) for c in STUDY_COLUMNS}

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        kw["flagged"] = tuple(kw.get("flagged") or ())
        return cls(**kw)


def ccc(estimates, truth):
    """Lin's concordance correlation coefficient with population variances."""
    x = np.asarray(estimates, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("ccc needs two vectors of equal length >= 2")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    if vx == 0 and vy == 0:
        raise DomainError("ccc is undefined when both vectors are constant")
    sxy = np.mean((x - mx) * (y - my))
    return float(2.0 * sxy / (vx + vy + (mx - my) ** 2))


def cmd(X1, X2):
    """Correlation matrix distance ``1 - tr(X1 X2) / (|X1|_F |X2|_F)``."""
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    if X1.shape != X2.shape or X1.ndim != 2 or X1.shape[0] != X1.shape[1]:
        raise ValueError("cmd needs two square matrices of the same size")
    num = np.trace(X1 @ X2)
    den = np.linalg.norm(X1, "fro") * np.linalg.norm(X2, "fro")
    return float(min(max(1.0 - num / den, 0.0), 1.0))


def relative_bias(estimates, truth):
    """Mean absolute relative error ``|est - true| / |true|``."""
    est = np.asarray(estimates, dtype=float)
    tru = np.broadcast_to(np.asarray(truth, dtype=float), est.shape)
    if np.any(tru == 0):
        raise DomainError("relative bias needs non-zero truth")
    return float(np.mean(np.abs(est - tru) / np.abs(tru)))


def coverage(lower, upper, truth):
    """Fraction of intervals ``[lower, upper]`` containing the truth."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    tru = np.broadcast_to(np.asarray(truth, dtype=float), lo.shape)
    if np.any(lo > hi):
        raise ValueError("interval lower bound exceeds upper bound")
    return float(np.mean((lo <= tru) & (tru <= hi)))


# ---------------------------------------------------------------------------
# observed-data likelihood


def _latent_upper(lam, theta, hurdle, tail):
    """Upper summation bound: the ``1 - tail`` quantile of the latent law."""
    if not hurdle:
        return stats.poisson.ppf(1.0 - tail, lam)
    # hurdle CDF: theta + (1 - theta) (F(n) - F(0)) / (1 - F(0))
    e = np.exp(-lam)
    level = e + (1.0 - tail - theta) * (1.0 - e) / (1.0 - theta)
    level = np.clip(level, 0.0, 1.0 - 1e-16)
    return stats.poisson.ppf(level, lam)


def _detect_terms(Y, lp):
    """Per-cell ``log p`` and ``log(1 - p)`` laid out ``(cells, T)``."""
    R, T, K, S = Y.shape
    lpb = np.broadcast_to(lp, (R, T, K, S))
    lpc = np.moveaxis(lpb, 1, -1).reshape(-1, T)
    return -np.logaddexp(0.0, -lpc), -np.logaddexp(0.0, lpc)


def _cell_sums(Y, loglam, lp, theta, hurdle, tail, max_states=200_000):
    """Non-AR per-cell ``log sum_N P(N) prod_t Bin(Y_t | N, p)`` by direct summation."""
    R, T, K, S = Y.shape
    Yc = np.moveaxis(Y, 1, -1).reshape(-1, T).astype(float)
    maxY = Yc.max(axis=1)
    lam = np.exp(loglam).ravel()
    upper = _latent_upper(lam, theta, hurdle, tail)
    log_p, log_q = _detect_terms(Y, lp)
    # when the counts sit in the latent tail the mass lies above max Y,
    # so the bound also covers the conditional's window around its mode
    lower = np.maximum(maxY, 1.0) if hurdle else maxY
    mode, sd = _mode_and_sd(lam, Yc, log_q, lower)
    upper = np.maximum(upper, np.ceil(mode + 12.0 * sd + 10.0))
    out = np.empty(len(lam))
    for c in range(len(lam)):
        n = np.arange(maxY[c], upper[c] + 1.0)
        if len(n) > max_states:
            raise RuntimeError("latent summation range is too large")
        prior = latent_logpmf_cells(n, np.full(n.shape, np.log(lam[c])), theta, hurdle)
        y = Yc[c]
        ll = (special.gammaln(n + 1.0)[:, None] - special.gammaln(n[:, None] - y + 1.0)
              - special.gammaln(y + 1.0) + y * log_p[c] + (n[:, None] - y) * log_q[c]).sum(axis=1)
        out[c] = special.logsumexp(prior + ll)
    return out.reshape(R, K, S)


def _obs_upper(y, log_q, lo, drop=60.0):
    """Largest ``n`` whose detection likelihood is within ``drop`` of its maximum.

    ``sum_t log Bin(y_t | n, p_t)`` is concave in ``n``, so a geometric scan
    past the maximum finds the cut-off. Returns ``inf`` when the likelihood
    is flat (``p`` numerically zero).
    """
    if np.all(log_q > -1e-12):
        return np.inf
    n = lo + np.concatenate([[0.0], np.round(np.logspace(0, 9, 200))])
    f = (special.gammaln(n + 1.0)[:, None] - special.gammaln(n[:, None] - y + 1.0)
         + (n[:, None] - y) * log_q).sum(axis=1)
    top = np.argmax(f)
    below = np.flatnonzero(f[top:] < f[top] - drop)
    return float(n[top + below[0]]) if below.size else np.inf


def _ar_cell_forward(Y, base, phi, lp, theta, hurdle, tail, max_states=4000):
    """AR log-likelihood per (site, species) by a forward pass over years.

    ``base`` holds ``a + x beta`` per (site, species). Year ``k`` states run
    from ``max_t Y`` up to the ``1 - tail`` quantile of the latent law at
    the largest rate reachable from the previous window, capped where the
    detection likelihood has become negligible.
    """
    R, T, K, S = Y.shape
    log_p, log_q = _detect_terms(Y, lp)
    log_p = log_p.reshape(R, K, S, T)
    log_q = log_q.reshape(R, K, S, T)
    Yr = np.moveaxis(Y, 1, -1).astype(float)  # (R, K, S, T)
    out = np.zeros((R, S))
    for i in range(R):
        for s in range(S):
            alpha = None
            prev_n = None
            for k in range(K):
                y = Yr[i, k, s]
                lo = y.max()
                if k == 0:
                    lam_hi = np.exp(base[i, s])
                else:
                    ends = np.log1p(np.array([prev_n[0], prev_n[-1]]))
                    lam_hi = np.exp(base[i, s] + (phi[s] * ends).max())
                hi = float(_latent_upper(np.array([lam_hi]), theta, hurdle, tail)[0])
                mode, sd = _mode_and_sd(np.array([lam_hi]), y[None, :], log_q[i, k, s][None, :],
                                        np.array([max(lo, 1.0) if hurdle else lo]))
                hi = max(hi, np.ceil(mode[0] + 12.0 * sd[0] + 10.0))
                hi = max(lo, min(hi, _obs_upper(y, log_q[i, k, s], lo)))
                n = np.arange(lo, hi + 1.0)
                if len(n) > max_states:
                    raise RuntimeError("latent summation range is too large")
                obs = (special.gammaln(n + 1.0)[:, None] - special.gammaln(n[:, None] - y + 1.0)
                       - special.gammaln(y + 1.0) + y * log_p[i, k, s] + (n[:, None] - y) * log_q[i, k, s]).sum(axis=1)
                if k == 0:
                    ll = np.full(n.shape, base[i, s])
                    alpha = latent_logpmf_cells(n, ll, theta, hurdle) + obs
                else:
                    ll = base[i, s] + phi[s] * np.log1p(prev_n)  # (n_prev,)
                    trans = latent_logpmf_cells(n[None, :], ll[:, None], theta, hurdle)
                    alpha = special.logsumexp(alpha[:, None] + trans, axis=0) + obs
                prev_n = n
            out[i, s] = special.logsumexp(alpha)
    return out


def _site_loglik_given_a(data, spec, point, a, tail, fast=True):
    """Observed-data log-likelihood per site with random effects ``a`` plugged in."""
    p2 = point.copy()
    p2.a = np.asarray(a, dtype=float)
    Y = np.asarray(data.Y)
    lp = logit_p(p2, data, spec)
    if spec.autoregressive and data.K > 1:
        base = log_lambda(p2, data, replace(spec, autoregressive=False))[:, 0, :]
        return _ar_cell_forward(Y, base, p2.phi, lp, p2.theta, spec.hurdle, tail).sum(axis=1)
    loglam = log_lambda(p2, data, spec)
    if fast:
        cells = enumerate_cells(loglam, lp, Y, spec.hurdle, p2.theta).logm
    else:
        cells = _cell_sums(Y, loglam, lp, p2.theta, spec.hurdle, tail)
    return cells.sum(axis=(1, 2))


def marginal_loglik(data: Dataset, spec: ModelSpec, point: Parameters, mode="plugin", tail=1e-10,
                    a_draws=None, n_importance=400, rng=None):
    """Observed-data log-likelihood with every latent abundance summed out.

    ``mode="plugin"`` evaluates at the random effects stored in ``point``;
    each cell's sum runs from ``max_t Y`` to the ``1 - tail`` quantile of
    its latent law, extended when needed to cover the cell's conditional
    given its counts (a forward pass over years for the AR variants).

    ``mode="integrated"`` also integrates the site random effects against
    ``MVN(mu_a, Sigma_a)`` by importance sampling. The proposal for site
    ``i`` is a normal fitted to posterior draws ``a_draws[:, i, :]`` with
    inflated covariance, so the result does not reward random effects
    tuned to individual cells.
    """
    spec = spec.resolved(data.S)
    Y = np.asarray(data.Y)
    if mode == "plugin":
        if spec.autoregressive and data.K > 1:
            return float(_site_loglik_given_a(data, spec, point, point.a, tail).sum())
        loglam = log_lambda(point, data, spec)
        lp = logit_p(point, data, spec)
        return float(_cell_sums(Y, loglam, lp, point.theta, spec.hurdle, tail).sum())
    if mode != "integrated":
        raise ValueError("mode must be 'plugin' or 'integrated'")
    if a_draws is None:
        raise ValueError("integrated likelihood needs posterior draws of the random effects")
    g = np.random.default_rng(0) if rng is None else rng
    a_draws = np.asarray(a_draws, dtype=float)
    R, S = data.R, data.S
    dim = spec.effective_dim(data.K)
    total = 0.0
    for i in range(R):
        m = a_draws[:, i, :].mean(axis=0)
        C = np.atleast_2d(np.cov(a_draws[:, i, :], rowvar=False)) * 1.5 + 1e-6 * np.eye(S)
        draws = np.asarray(rmvnormal(m, C, g, size=n_importance)).reshape(n_importance, S)
        log_q = np.atleast_1d(stats.multivariate_normal(m, C).logpdf(draws))
        log_prior = np.atleast_1d(stats.multivariate_normal(point.mu_a, point.Sigma_a).logpdf(draws))
        # every importance draw becomes a copy of site i
        rep = np.zeros(n_importance, dtype=np.int64) + i
        sub = Dataset(Y=Y[rep], X=None if data.X is None else data.X[rep],
                      Z=None if data.Z is None else data.Z[rep])
        sub_point = point.copy()
        if dim in ("A", "B"):
            sub_point.logit_p = np.asarray(point.logit_p, dtype=float)[rep]
        ll = _site_loglik_given_a(sub, spec, sub_point, draws, tail)
        total += special.logsumexp(ll + log_prior - log_q) - np.log(n_importance)
    return float(total)


def n_params(spec: ModelSpec, R, K, S, q_lambda=0, q_p=0, convention="table"):
    """Number of estimated parameters for BIC.

    ``convention="table"`` counts detection cells, ``S`` means, the
    ``S (S + 1) / 2`` covariance entries, one zero probability for the
    hurdle, two autoregressive terms and two coefficients per covariate;
    this matches the usual comparison-table counts. ``"full"`` counts
    per-species autoregressive and covariate coefficients instead.
    """
    dim = spec.effective_dim(K)
    cells = {"A": R * K * S, "B": R * S, "C": S}[dim]
    out = cells + S + S * (S + 1) // 2
    if spec.hurdle:
        out += 1
    if convention == "table":
        if spec.autoregressive:
            out += 2
        out += 2 * (q_lambda + q_p)
    elif convention == "full":
        if spec.autoregressive:
            out += S
        out += S * (q_lambda + q_p)
    else:
        raise ValueError("convention must be 'table' or 'full'")
    return out


def bic(loglik, n_params, n_obs):
    """``-2 loglik + n_params log(n_obs)``."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    return float(-2.0 * loglik + n_params * math.log(n_obs))


def posterior_point(draws) -> Parameters:
    """Posterior means of every continuous parameter as a :class:`Parameters`.

    Detection cells are averaged on the probability scale and mapped back
    to logits.
    """
    mean = draws.posterior_mean
    blocks = draws.blocks
    pbar = np.clip(mean("p"), 1e-12, 1 - 1e-12)
    return Parameters(
        a=mean("a"), mu_a=mean("mu_a"), Sigma_a=mean("Sigma_a"), logit_p=special.logit(pbar),
        beta=mean("beta") if "beta" in blocks else np.zeros((0, 0)),
        b_cov=mean("b_cov") if "b_cov" in blocks else np.zeros((0, 0)),
        theta=float(mean("theta")) if "theta" in blocks else None,
        phi=mean("phi") if "phi" in blocks else None,
    )


def model_bic(data: Dataset, draws, mode="integrated", convention="table", n_importance=400, seed=0):
    """BIC of a fitted model at its posterior means; ``n_obs`` is ``Y.size``.

    Returns ``(bic, loglik, n_params)``.
    """
    spec = draws.spec
    point = posterior_point(draws)
    a_draws = draws.pooled("a") if mode == "integrated" else None
    ll = marginal_loglik(data, spec, point, mode=mode, a_draws=a_draws, n_importance=n_importance,
                         rng=np.random.default_rng(seed))
    k = n_params(spec, data.R, data.K, data.S, data.q_lambda, data.q_p, convention)
    return bic(ll, k, data.Y.size), ll, k


# ---------------------------------------------------------------------------
# Mann-Kendall


@dataclass(frozen=True)
class MannKendall:
    S: int
    tau: float
    p: float
    var_S: float
    method: str


def _kendall_exact_upper(n, s_obs):
    """``P(S >= s_obs)`` under no trend and no ties, via inversion counts."""
    counts = np.array([1.0])
    for m in range(2, n + 1):
        new = np.zeros(len(counts) + m - 1)
        for j in range(m):
            new[j:j + len(counts)] += counts
        counts = new
    counts /= counts.sum()
    M = n * (n - 1) // 2
    S_vals = M - 2 * np.arange(len(counts))
    return float(counts[S_vals >= s_obs].sum())


def _mk_statistic(x):
    d = np.sign(x[None, :] - x[:, None])
    return int(np.triu(d, 1).sum())


def mann_kendall(series, method="auto", continuity=True):
    """One-sided Mann-Kendall test for an increasing trend.

    ``method`` is ``"exact"`` (null distribution of ``S`` over all orderings),
    ``"normal"`` (normal approximation with tie-corrected variance and an
    optional continuity correction) or ``"auto"``. ``"auto"`` is exact when
    there are no ties or ``n < 8`` and normal otherwise. A constant series
    returns ``tau = 0`` and ``p = 0.5``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = len(x)
    if n < 3:
        raise ValueError("Mann-Kendall needs at least three values")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    S = _mk_statistic(x)
    _, t = np.unique(x, return_counts=True)
    ties = t[t > 1]
    n0 = n * (n - 1) / 2
    n1 = float(np.sum(ties * (ties - 1) / 2))
    var_S = (n * (n - 1) * (2 * n + 5) - np.sum(ties * (ties - 1) * (2 * ties + 5))) / 18.0
    if n1 == n0:
        return MannKendall(S=0, tau=0.0, p=0.5, var_S=0.0, method="constant")
    tau = S / math.sqrt((n0 - n1) * n0) if len(ties) else S / n0
    if method == "auto":
        method = "exact" if (len(ties) == 0 or n < 8) else "normal"
    if method == "exact":
        if len(ties) == 0:
            p = _kendall_exact_upper(n, S)
        else:
            if n > 9:
                raise ValueError("exact test with ties is limited to n <= 9")
            perm = np.array([_mk_statistic(np.array(q)) for q in itertools.permutations(x)])
            p = float(np.mean(perm >= S))
    elif method == "normal":
        cc = 1.0 if continuity else 0.0
        if S > 0:
            z = (S - cc) / math.sqrt(var_S)
        elif S < 0:
            z = (S + cc) / math.sqrt(var_S)
        else:
            z = 0.0
        p = float(stats.norm.sf(z))
    else:
        raise ValueError("method must be 'auto', 'exact' or 'normal'")
    return MannKendall(S=S, tau=float(tau), p=p, var_S=float(var_S), method=method)
