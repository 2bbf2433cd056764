"""Metropolis-within-Gibbs sampler for the multi-species N-mixture models.

Each sweep updates, in order: latent abundances ``N``, random effects ``a``
(one species at a time, all sites at once), abundance coefficients
``beta``, autoregressive coefficients ``phi``, detection logits and
detection-covariate coefficients by random-walk Metropolis, then ``mu_a``,
``Sigma_a`` and ``theta`` by exact conjugate draws.

Without autoregression the latent cells are conditionally independent.
There the detection logits move twice per sweep with ``N`` summed out:
jointly with the log-rates along the ``lambda * p`` ridge, then alone.
Each move ends with an exact draw of ``N``. This replaces the random-walk
updates of ``N`` and the detection logits, which mix very slowly along
that ridge.

Proposal scales adapt only during burn-in and are frozen afterwards.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .distributions import RngStream, rinvwishart, rmvnormal, rztpoisson, ztpoisson_logpmf
from .latent import enumerate_cells
from .model import (
    Dataset,
    InvalidStateError,
    ModelSpec,
    Parameters,
    detection_shape,
    latent_logpmf_cells,
    log_lambda,
    logit_p,
)

__all__ = [
    "SamplerError",
    "SamplerConfig",
    "ChainState",
    "Chain",
    "PosteriorDraws",
    "PosteriorSummary",
    "fit",
    "update_latent_N",
    "gibbs_update_N",
    "update_ridge",
    "update_detection_collapsed",
    "gibbs_update_mu_a",
    "gibbs_update_sigma_a",
    "mh_update_block",
    "update_theta",
    "rhat",
    "summarize",
]

log = logging.getLogger(__name__)

MH_BLOCKS = ("N", "a", "beta", "phi", "logit_p", "b_cov", "ridge")
TARGET_ACCEPT = {"N": 0.3, "a": 0.44, "beta": 0.44, "phi": 0.44, "logit_p": 0.44, "b_cov": 0.44,
                 "ridge": 0.3}
DEFAULT_SCALES = {"N": 1.0, "a": 0.3, "beta": 0.1, "phi": 0.05, "logit_p": 0.3, "b_cov": 0.1,
                  "ridge": 0.3}
QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
QUANTILE_COLUMNS = ("q2.5", "q25", "q50", "q75", "q97.5")


class SamplerError(RuntimeError):
    """Raised when every chain degenerates in some block."""

    def __init__(self, block, message):
        super().__init__(f"{block}: {message}")
        self.block = block


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_iter: int = 50_000
    n_burn: int = 10_000
    thin: int = 5
    rhat_threshold: float = 1.05
    seed: int = 0
    scales: dict = field(default_factory=dict)
    adapt: bool = True
    adapt_interval: int = 50
    fixed: dict = field(default_factory=dict)
    store_latent: bool = True
    degenerate_window: int = 1000
    latent_update: str = "auto"

    def __post_init__(self):
        if self.latent_update not in ("auto", "gibbs", "metropolis"):
            raise ValueError("latent_update must be 'auto', 'gibbs' or 'metropolis'")
        if self.n_burn >= self.n_iter:
            raise ValueError("n_burn must be smaller than n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")

    @property
    def n_keep(self):
        return (self.n_iter - self.n_burn) // self.thin


# ---------------------------------------------------------------------------
# state and cached data pieces


class _Obs:
    """Precomputed pieces of the binomial observation model."""

    def __init__(self, data: Dataset):
        self.set_counts(data.Y)

    def set_counts(self, Y):
        self.Y = np.asarray(Y, dtype=float)
        self.T = self.Y.shape[1]
        self.Ysum = self.Y.sum(axis=1)
        self.lgY = special.gammaln(self.Y + 1.0).sum(axis=1)
        self.maxY = self.Y.max(axis=1).astype(np.int64)

    def comb(self, N):
        """``sum_t log C(N, Y_t)`` with ``-inf`` where ``N < max_t Y``."""
        N4 = N[:, None, :, :]
        with np.errstate(invalid="ignore"):
            out = (self.T * special.gammaln(N + 1.0) - self.lgY
                   - special.gammaln(N4 - self.Y + 1.0).sum(axis=1))
        return np.where(N >= self.maxY, out, -np.inf)

    def detect(self, N, lp):
        """Detection part of the log-likelihood, summed over occasions."""
        if lp.shape[1] == 1:
            lp3 = lp[:, 0]
            return -self.Ysum * np.logaddexp(0.0, -lp3) - (self.T * N - self.Ysum) * np.logaddexp(0.0, lp3)
        return (-self.Y * np.logaddexp(0.0, -lp) - (N[:, None] - self.Y) * np.logaddexp(0.0, lp)).sum(axis=1)

    def loglik(self, N, lp):
        return self.comb(N) + self.detect(N, lp)


@dataclass
class ChainState:
    params: Parameters
    N: np.ndarray
    loglam: np.ndarray
    lp: np.ndarray
    xb: np.ndarray | float = 0.0


def _latent(state: ChainState, spec: ModelSpec, N=None, loglam=None):
    N = state.N if N is None else N
    loglam = state.loglam if loglam is None else loglam
    return latent_logpmf_cells(N, loglam, state.params.theta, spec.hurdle)


def _ar_shift(phi, N):
    """AR contribution to log-rates for years 2..K given abundances ``N``."""
    return phi * np.log1p(N[:, :-1, :])


def _mh_accept(log_ratio, rng):
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    return np.log(rng.random(np.shape(log_ratio))) < log_ratio


# ---------------------------------------------------------------------------
# block updates


def _n_target(state, spec, obs, N, lp):
    """Per-cell log target of ``N`` excluding the next-year AR term."""
    if spec.autoregressive and N.shape[1] > 1:
        loglam = state.loglam.copy()
        loglam[:, 1:] = (state.params.a + state.xb)[:, None, :] + _ar_shift(state.params.phi, N)
    else:
        loglam = state.loglam
    return latent_logpmf_cells(N, loglam, state.params.theta, spec.hurdle) + obs.loglik(N, lp), loglam


def _next_year_term(state, spec, N, loglam_base):
    """``log p(N_{k+1} | lambda_{k+1}(N_k))`` attached to year ``k``; zero in the last year."""
    out = np.zeros(N.shape)
    K = N.shape[1]
    if K > 1:
        ll_next = (state.params.a + state.xb)[:, None, :] + _ar_shift(state.params.phi, N)
        out[:, :-1] = latent_logpmf_cells(state.N[:, 1:], ll_next, state.params.theta, spec.hurdle)
    return out


def update_latent_N(state: ChainState, obs: _Obs, spec: ModelSpec, width, rng):
    """Metropolis update of every latent abundance cell.

    Proposals are symmetric integer steps ``+-U{1..width}``; under the
    hurdle, cells whose counts are all zero alternatively propose the jump
    ``0 -> ZTP(lambda)`` or ``n -> 0`` with the matching Hastings term.
    Moves below ``max_t Y`` have zero target mass and are always rejected.
    For AR models, even and odd years are updated as separate blocks since
    each year interacts only with its neighbours.
    Returns the per-cell acceptance indicator.
    """
    accepted = np.zeros(state.N.shape, dtype=bool)
    if spec.autoregressive and state.N.shape[1] > 1:
        parities = (0, 1)
    else:
        parities = (None,)
    for par in parities:
        N = state.N
        wmax = np.maximum(np.floor(width), 1).astype(np.int64)
        step = rng.integers(1, wmax + 1) * rng.choice(np.array([-1, 1]), size=N.shape)
        prop = N + step
        log_q = np.zeros(N.shape)
        if spec.hurdle:
            jump = (obs.maxY == 0) & (rng.random(N.shape) < 0.5)
            if np.any(jump):
                lam = np.exp(state.loglam)
                from_zero = jump & (N == 0)
                to_zero = jump & (N > 0)
                if np.any(from_zero):
                    draws = rztpoisson(lam[from_zero], rng)
                    prop[from_zero] = draws
                    log_q[from_zero] = -ztpoisson_logpmf(draws, lam[from_zero])
                prop[to_zero] = 0
                log_q[to_zero] = ztpoisson_logpmf(N[to_zero], lam[to_zero])
        if par is not None:
            mask = np.zeros(N.shape, dtype=bool)
            mask[:, par::2] = True
            prop = np.where(mask, prop, N)
        else:
            mask = None
        prop = np.maximum(prop, -1)
        valid = prop >= obs.maxY
        safe_prop = np.where(valid, prop, N)
        cur_t, _ = _n_target(state, spec, obs, N, state.lp)
        prop_t, _ = _n_target(state, spec, obs, safe_prop, state.lp)
        if spec.autoregressive and N.shape[1] > 1:
            cur_t = cur_t + _next_year_term(state, spec, N, None)
            prop_t = prop_t + _next_year_term(state, spec, safe_prop, None)
        with np.errstate(invalid="ignore"):
            log_r = prop_t - cur_t + log_q
        acc = _mh_accept(log_r, rng) & valid
        if mask is not None:
            acc &= mask
        state.N = np.where(acc, prop, N)
        accepted |= acc
        if spec.autoregressive and N.shape[1] > 1:
            _refresh_loglam(state)
    return accepted


def _refresh_loglam(state):
    p = state.params
    eta = p.a + state.xb
    ll = np.repeat(eta[:, None, :], state.N.shape[1], axis=1)
    if p.phi is not None and state.N.shape[1] > 1:
        ll[:, 1:] += _ar_shift(p.phi, state.N)
    state.loglam = ll


def _update_a(state, spec, scale, rng):
    p = state.params
    R, S = p.a.shape
    if R == 0:
        return np.zeros((0, S), dtype=bool)
    prec = np.linalg.inv(p.Sigma_a)
    dev = p.a - p.mu_a
    accepted = np.zeros((R, S), dtype=bool)
    eps = rng.standard_normal((R, S)) * scale
    logu = np.log(rng.random((R, S)))
    for s in range(S):
        d = eps[:, s]
        pd_s = dev @ prec[:, s]
        dprior = -(d * pd_s + 0.5 * d * d * prec[s, s])
        Ns = state.N[:, :, s]
        ll = state.loglam[:, :, s]
        cur = latent_logpmf_cells(Ns, ll, p.theta, spec.hurdle).sum(axis=1)
        new_ll = ll + d[:, None]
        new = latent_logpmf_cells(Ns, new_ll, p.theta, spec.hurdle).sum(axis=1)
        r = new - cur + dprior
        acc = logu[:, s] < np.where(np.isnan(r), -np.inf, r)
        if np.any(acc):
            p.a[acc, s] += d[acc]
            dev[acc, s] += d[acc]
            state.loglam[acc, :, s] = new_ll[acc]
        accepted[:, s] = acc
    return accepted


def _update_beta(state, data, spec, scale, rng):
    p = state.params
    S, q = p.beta.shape
    accepted = np.zeros((S, q), dtype=bool)
    for j in range(q):
        d = rng.standard_normal(S) * scale[:, j]
        shift = data.X[:, j][:, None] * d[None, :]  # (R, S)
        new_ll = state.loglam + shift[:, None, :]
        cur = _latent(state, spec).sum(axis=(0, 1))
        new = _latent(state, spec, loglam=new_ll).sum(axis=(0, 1))
        b_new = p.beta[:, j] + d
        dprior = -(b_new ** 2 - p.beta[:, j] ** 2) / (2 * spec.beta_var)
        acc = _mh_accept(new - cur + dprior, rng)
        p.beta[acc, j] = b_new[acc]
        state.loglam[:, :, acc] = new_ll[:, :, acc]
        accepted[:, j] = acc
    state.xb = data.X @ p.beta.T
    return accepted


def _update_phi(state, spec, scale, rng):
    p = state.params
    S = p.phi.shape[0]
    if state.N.shape[1] < 2:
        d = rng.standard_normal(S) * scale
        new_phi = p.phi + d
        acc = _mh_accept(_phi_prior(new_phi, spec) - _phi_prior(p.phi, spec), rng)
        p.phi = np.where(acc, new_phi, p.phi)
        return acc
    d = rng.standard_normal(S) * scale
    new_phi = p.phi + d
    new_ll = state.loglam.copy()
    new_ll[:, 1:] += d * np.log1p(state.N[:, :-1])
    cur = _latent(state, spec)[:, 1:].sum(axis=(0, 1))
    new = _latent(state, spec, loglam=new_ll)[:, 1:].sum(axis=(0, 1))
    acc = _mh_accept(new - cur + _phi_prior(new_phi, spec) - _phi_prior(p.phi, spec), rng)
    p.phi = np.where(acc, new_phi, p.phi)
    state.loglam[:, :, acc] = new_ll[:, :, acc]
    return acc


def _phi_prior(phi, spec):
    var = np.diag(spec.Sigma_phi)
    return -0.5 * (phi - spec.mu_phi) ** 2 / var


def _logistic_logpdf(x):
    # density of the standard logistic: uniform prior on the probability scale
    return -x - 2.0 * np.logaddexp(0.0, -x)


def _reduce_to_dim(cells, dim):
    if dim == "A":
        return cells
    if dim == "B":
        return cells.sum(axis=1)
    return cells.sum(axis=(0, 1))


def _update_logit_p(state, obs, data, spec, scale, rng):
    p = state.params
    dim = spec.effective_dim(data.K)
    cur_cells = np.asarray(p.logit_p, dtype=float)
    d = rng.standard_normal(cur_cells.shape) * scale
    new_cells = cur_cells + d
    trial = p.copy()
    trial.logit_p = new_cells
    new_lp = logit_p(trial, data, spec)
    cur = _reduce_to_dim(obs.detect(state.N, state.lp), dim)
    new = _reduce_to_dim(obs.detect(state.N, new_lp), dim)
    log_r = new - cur + _logistic_logpdf(new_cells) - _logistic_logpdf(cur_cells)
    acc = _mh_accept(log_r, rng)
    p.logit_p = np.where(acc, new_cells, cur_cells)
    state.lp = logit_p(p, data, spec)
    return acc


def _update_bcov(state, obs, data, spec, scale, rng):
    p = state.params
    S, q = p.b_cov.shape
    accepted = np.zeros((S, q), dtype=bool)
    for j in range(q):
        d = rng.standard_normal(S) * scale[:, j]
        new_lp = state.lp + (data.Z[:, :, j][:, :, None] * d[None, None, :])[:, :, None, :]
        cur = obs.detect(state.N, state.lp).sum(axis=(0, 1))
        new = obs.detect(state.N, new_lp).sum(axis=(0, 1))
        b_new = p.b_cov[:, j] + d
        dprior = -(b_new ** 2 - p.b_cov[:, j] ** 2) / (2 * spec.bcov_var)
        acc = _mh_accept(new - cur + dprior, rng)
        p.b_cov[acc, j] = b_new[acc]
        accepted[:, j] = acc
        state.lp = logit_p(p, data, spec)
    return accepted


def gibbs_update_N(state: ChainState, obs: _Obs, spec: ModelSpec, rng):
    """Exact draw of every latent cell from its full conditional.

    Valid when cells are conditionally independent, i.e. without
    autoregression.
    """
    grid = enumerate_cells(state.loglam, state.lp, obs.Y, spec.hurdle, state.params.theta)
    state.N = grid.sample(rng)
    return np.ones(state.N.shape, dtype=bool)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def update_detection_collapsed(state: ChainState, obs: _Obs, data: Dataset, spec: ModelSpec, scale, rng):
    """Random-walk move of the detection logits with ``N`` summed out.

    Each detection cell is accepted against the marginal likelihood of the
    latent cells it touches; the latent cells are then redrawn exactly.
    This complements the ridge move when the data say little about ``p``.
    """
    p = state.params
    dim = spec.effective_dim(data.K)
    cur = np.asarray(p.logit_p, dtype=float)
    new = cur + rng.standard_normal(cur.shape) * scale
    trial = p.copy()
    trial.logit_p = new
    new_lp = logit_p(trial, data, spec)
    e0 = enumerate_cells(state.loglam, state.lp, obs.Y, spec.hurdle, p.theta)
    e1 = enumerate_cells(state.loglam, new_lp, obs.Y, spec.hurdle, p.theta)
    log_r = (_reduce_to_dim(e1.logm - e0.logm, dim)
             + _logistic_logpdf(new) - _logistic_logpdf(cur))
    acc = _mh_accept(log_r, rng)
    p.logit_p = np.where(acc, new, cur)
    state.lp = logit_p(p, data, spec)
    cell_acc = acc[:, None, :] if dim == "B" else acc
    state.N = np.where(np.broadcast_to(cell_acc, state.N.shape), e1.sample(rng), e0.sample(rng))
    return acc


def _ridge_shared(state, obs, data, spec, scale, rng):
    """Ridge move for species-level detection, all species at once.

    With a diagonal prior covariance for the random-effect mean the
    acceptance ratio factorises over species, so one pair of enumerations
    serves every species.
    """
    p = state.params
    cur = np.asarray(p.logit_p, dtype=float)
    d = rng.standard_normal(cur.shape) * scale
    new = cur + d
    delta = _log_sigmoid(new) - _log_sigmoid(cur)
    ll1 = state.loglam - delta
    lp1 = state.lp + d
    e0 = enumerate_cells(state.loglam, state.lp, obs.Y, spec.hurdle, p.theta)
    e1 = enumerate_cells(ll1, lp1, obs.Y, spec.hurdle, p.theta)
    dm = (e1.logm - e0.logm).sum(axis=(0, 1))
    prec0 = 1.0 / np.diag(spec.Sigma0)
    step = -delta
    dmu = -(step * (p.mu_a - spec.mu0) * prec0 + 0.5 * step ** 2 * prec0)
    acc = _mh_accept(dm + _logistic_logpdf(new) - _logistic_logpdf(cur) + dmu, rng)
    p.logit_p = np.where(acc, new, cur)
    p.mu_a = np.where(acc, p.mu_a + step, p.mu_a)
    p.a = np.where(acc, p.a + step, p.a)
    n0, n1 = e0.sample(rng), e1.sample(rng)
    state.N = np.where(acc, n1, n0)
    state.lp = logit_p(p, data, spec)
    _refresh_loglam(state)
    return acc


def update_ridge(state: ChainState, obs: _Obs, data: Dataset, spec: ModelSpec, scale, rng, move_mu=True):
    """Joint move along the ``lambda * p`` ridge with ``N`` summed out.

    Detection logits of one species move by a random step and the matching
    log-rates move by minus the change in ``log p``, so the expected count
    stays roughly fixed. When detection is shared across sites the
    random-effect mean shifts along with the site effects (unless
    ``move_mu`` is false, e.g. when the mean is held fixed). The shift is a
    deterministic antisymmetric function of the step, so the proposal is
    volume preserving. Latent cells of the species are redrawn exactly.
    """
    p = state.params
    dim = spec.effective_dim(data.K)
    R, K, S = state.N.shape
    cells = np.asarray(p.logit_p, dtype=float)
    acc_all = np.zeros(cells.shape, dtype=bool)
    if dim == "C" and move_mu and np.all(spec.Sigma0 == np.diag(np.diag(spec.Sigma0))):
        return _ridge_shared(state, obs, data, spec, scale, rng)
    prec_a = np.linalg.inv(p.Sigma_a)
    prec_0 = np.linalg.inv(spec.Sigma0)
    for s in range(S):
        cur = cells[..., s]
        d = rng.standard_normal(np.shape(cur)) * scale[..., s]
        new = cur + d
        delta = _log_sigmoid(new) - _log_sigmoid(cur)
        if dim == "A":
            D, lp_step = delta.mean(axis=1), d[:, None, :]
        elif dim == "B":
            D, lp_step = delta, d[:, None, None]
        else:
            D, lp_step = np.full(R, float(delta)), float(d)
        sl = slice(s, s + 1)
        ll0 = state.loglam[:, :, sl]
        ll1 = ll0 - D[:, None, None]
        lp0 = state.lp[..., sl]
        lp1 = lp0 + np.asarray(lp_step)[..., None] if np.ndim(lp_step) else lp0 + lp_step
        e0 = enumerate_cells(ll0, lp0, obs.Y[..., sl], spec.hurdle, p.theta)
        e1 = enumerate_cells(ll1, lp1, obs.Y[..., sl], spec.hurdle, p.theta)
        dm = (e1.logm - e0.logm)[:, :, 0]
        dprior = _logistic_logpdf(new) - _logistic_logpdf(cur)
        if dim == "C" and move_mu:
            dev = p.mu_a - spec.mu0
            step = -float(delta)
            log_r = dm.sum() + dprior - (step * (dev @ prec_0[:, s]) + 0.5 * step ** 2 * prec_0[s, s])
            acc = _mh_accept(np.asarray(log_r), rng)
            site_acc = np.full(R, bool(acc))
            if acc:
                p.mu_a = p.mu_a.copy()
                p.mu_a[s] += step
        else:
            dev = p.a - p.mu_a
            step = -D
            da = -(step * (dev @ prec_a[:, s]) + 0.5 * step ** 2 * prec_a[s, s])
            if dim == "A":
                log_r = dm.sum(axis=1) + dprior.sum(axis=1) + da
            elif dim == "B":
                log_r = dm.sum(axis=1) + dprior + da
            else:
                log_r = np.asarray(dm.sum() + dprior + da.sum())
            if dim == "C":
                acc = _mh_accept(log_r, rng)
                site_acc = np.full(R, bool(acc))
            else:
                site_acc = _mh_accept(log_r, rng)
                acc = site_acc[:, None] if dim == "A" else site_acc
        acc_all[..., s] = acc
        cells[..., s] = np.where(acc, new, cur)
        p.a[site_acc, s] -= D[site_acc]
        n0, n1 = e0.sample(rng)[:, :, 0], e1.sample(rng)[:, :, 0]
        state.N[:, :, s] = np.where(site_acc[:, None], n1, n0)
    p.logit_p = cells
    state.lp = logit_p(p, data, spec)
    _refresh_loglam(state)
    return np.broadcast_to(acc_all, cells.shape)


def mh_update_block(block: str, state: ChainState, data: Dataset, spec: ModelSpec, scale, rng, obs=None):
    """Gaussian random-walk Metropolis update of one parameter block.

    ``block`` is one of ``a``, ``beta``, ``phi``, ``logit_p`` or ``b_cov``;
    detection cells move on the logit scale. Updates ``state`` in place and
    returns the elementwise acceptance indicators.
    """
    obs = _Obs(data) if obs is None else obs
    scale = np.asarray(scale, dtype=float)
    if block == "a":
        return _update_a(state, spec, scale if scale.ndim else np.full(state.params.a.shape, float(scale)), rng)
    if block == "beta":
        return _update_beta(state, data, spec, np.broadcast_to(scale, state.params.beta.shape), rng)
    if block == "phi":
        return _update_phi(state, spec, np.broadcast_to(scale, state.params.phi.shape), rng)
    if block == "logit_p":
        return _update_logit_p(state, obs, data, spec, scale, rng)
    if block == "b_cov":
        return _update_bcov(state, obs, data, spec, np.broadcast_to(scale, state.params.b_cov.shape), rng)
    raise ValueError(f"unknown block {block!r}")


def gibbs_update_mu_a(a, Sigma_a, mu0, Sigma0, rng):
    """Conjugate draw of the random-effect mean given the site effects."""
    a = np.asarray(a, dtype=float)
    R = a.shape[0]
    P0 = np.linalg.inv(Sigma0)
    if R == 0:
        return rmvnormal(mu0, Sigma0, rng)
    Pa = np.linalg.inv(Sigma_a)
    prec = P0 + R * Pa
    rhs = P0 @ mu0 + R * Pa @ a.mean(axis=0)
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("posterior precision of mu_a is singular") from exc
    mean = np.linalg.solve(prec, rhs)
    z = rng.standard_normal(len(mean))
    # x = mean + L^-T z has covariance prec^-1
    return mean + np.linalg.solve(L.T, z)


def gibbs_update_sigma_a(a, mu_a, Omega, nu, rng):
    """Conjugate inverse-Wishart draw of the random-effect covariance."""
    dev = np.asarray(a, dtype=float) - mu_a
    scatter = dev.T @ dev
    return rinvwishart(Omega + scatter, nu + dev.shape[0], rng)


def update_theta(N, beta_shapes, rng):
    """Conjugate Beta draw of the hurdle zero probability."""
    N = np.asarray(N)
    zeros = int(np.sum(N == 0))
    return float(rng.beta(beta_shapes[0] + zeros, beta_shapes[1] + N.size - zeros))


# ---------------------------------------------------------------------------
# chains


class Chain:
    """One Markov chain: state, proposal scales and a sweep method."""

    def __init__(self, data: Dataset, spec: ModelSpec, rng: RngStream | np.random.Generator,
                 scales: dict | None = None, fixed: dict | None = None, init: Parameters | None = None,
                 init_N=None, latent_update="auto"):
        self.data = data
        self.spec = spec.resolved(data.S)
        if spec.autoregressive and data.K < 2:
            raise ValueError("autoregressive models need K >= 2 years")
        self.rng = rng.generator if isinstance(rng, RngStream) else rng
        self.obs = _Obs(data)
        self.fixed = dict(fixed or {})
        self.dim = self.spec.effective_dim(data.K)
        if latent_update == "gibbs" and self.spec.autoregressive:
            raise ValueError("exact latent draws are unavailable for autoregressive models")
        # exact draws need conditionally independent cells, so AR keeps Metropolis
        self.collapsed = (latent_update != "metropolis" and not self.spec.autoregressive
                          and "N" not in self.fixed)
        self.state = self._initial_state(init, init_N)
        self.scales = self._initial_scales(scales or {})
        self.n_accept = {b: 0 for b in MH_BLOCKS}
        self.n_tried = {b: 0 for b in MH_BLOCKS}
        self._batch = {b: None for b in MH_BLOCKS}
        self._batch_n = 0

    # -- initialisation -------------------------------------------------
    def _initial_state(self, init, init_N):
        data, spec, rng = self.data, self.spec, self.rng
        R, K, S = data.R, data.K, data.S
        maxY = self.obs.maxY
        if init_N is not None:
            N = np.array(init_N, dtype=np.int64)
        elif spec.hurdle:
            N = np.where(maxY > 0, maxY + 1, 0)
        else:
            N = maxY + 1
        if init is not None:
            params = init.copy()
        else:
            mu = np.log(N.mean(axis=(0, 1)) + 0.5)
            Sigma = np.eye(S) * 0.25
            a = rmvnormal(mu, Sigma, rng, size=R) if R else np.zeros((0, S))
            params = Parameters(
                a=np.asarray(a, float).reshape(R, S), mu_a=mu.copy(), Sigma_a=Sigma,
                logit_p=np.zeros(detection_shape(self.dim, R, K, S)),
                beta=np.zeros((S, data.q_lambda)), b_cov=np.zeros((S, data.q_p)),
                theta=float(np.clip(np.mean(maxY == 0), 0.01, 0.99)) if spec.hurdle else None,
                phi=np.zeros(S) if spec.autoregressive else None,
            )
        for name, value in self.fixed.items():
            if name == "N":
                N = np.array(value, dtype=np.int64)
            elif name == "theta":
                params.theta = float(value)
            else:
                setattr(params, name, np.array(value, dtype=float))
        if np.any(N < maxY):
            raise ValueError("initial abundances fall below observed counts")
        params.check(spec)
        xb = data.X @ params.beta.T if data.X is not None and params.beta.size else 0.0
        state = ChainState(params=params, N=N, loglam=None, lp=None, xb=xb)
        _refresh_loglam(state)
        state.lp = logit_p(params, data, spec)
        return state

    def _initial_scales(self, given):
        p = self.state.params
        shapes = {"N": self.state.N.shape, "a": p.a.shape, "beta": p.beta.shape,
                  "phi": (0,) if p.phi is None else p.phi.shape,
                  "logit_p": np.shape(p.logit_p), "b_cov": p.b_cov.shape,
                  "ridge": np.shape(p.logit_p)}
        out = {}
        for b, shp in shapes.items():
            val = given.get(b, DEFAULT_SCALES[b])
            out[b] = np.broadcast_to(np.asarray(val, dtype=float), shp).copy()
        return out

    def set_counts(self, Y):
        """Swap in new counts of the same shape (used by consistency checks)."""
        self.data = Dataset(Y=Y, X=self.data.X, Z=self.data.Z, site_ids=self.data.site_ids,
                            years=self.data.years, species_ids=self.data.species_ids)
        self.obs.set_counts(self.data.Y)

    # -- sweeping -------------------------------------------------------
    def _active(self, block):
        if block in self.fixed:
            return False
        p = self.state.params
        if block == "beta":
            return p.beta.size > 0
        if block == "b_cov":
            return p.b_cov.size > 0
        if block == "phi":
            return self.spec.autoregressive
        return True

    def sweep(self, adapt=False):
        st, spec, data, rng = self.state, self.spec, self.data, self.rng
        results = {}
        if self.collapsed:
            if self._active("logit_p"):
                results["ridge"] = update_ridge(st, self.obs, data, spec, self.scales["ridge"], rng,
                                                move_mu="mu_a" not in self.fixed)
                results["logit_p"] = update_detection_collapsed(st, self.obs, data, spec,
                                                                self.scales["logit_p"], rng)
            else:
                results["N"] = gibbs_update_N(st, self.obs, spec, rng)
        elif self._active("N"):
            results["N"] = update_latent_N(st, self.obs, spec, self.scales["N"], rng)
        if self._active("a"):
            results["a"] = _update_a(st, spec, self.scales["a"], rng)
        if self._active("beta"):
            results["beta"] = _update_beta(st, data, spec, self.scales["beta"], rng)
        if self._active("phi"):
            results["phi"] = _update_phi(st, spec, self.scales["phi"], rng)
        if self._active("logit_p") and not self.collapsed:
            results["logit_p"] = _update_logit_p(st, self.obs, data, spec, self.scales["logit_p"], rng)
        if self._active("b_cov"):
            results["b_cov"] = _update_bcov(st, self.obs, data, spec, self.scales["b_cov"], rng)
        p = st.params
        if "mu_a" not in self.fixed:
            p.mu_a = gibbs_update_mu_a(p.a, p.Sigma_a, spec.mu0, spec.Sigma0, rng)
        if "Sigma_a" not in self.fixed:
            p.Sigma_a = gibbs_update_sigma_a(p.a, p.mu_a, spec.Omega, spec.nu, rng)
        if spec.hurdle and "theta" not in self.fixed:
            p.theta = update_theta(st.N, spec.theta_shapes, rng)
        for b, acc in results.items():
            self.n_accept[b] += int(acc.sum())
            self.n_tried[b] += acc.size
            if adapt:
                self._batch[b] = acc.astype(float) if self._batch[b] is None else self._batch[b] + acc
        return results

    def adapt_scales(self, n_batch):
        """Nudge each element's proposal scale toward its target acceptance."""
        for b, counts in self._batch.items():
            if counts is None:
                continue
            rate = counts / n_batch
            factor = np.exp(rate - TARGET_ACCEPT[b])
            if b == "N":
                self.scales[b] = np.clip(self.scales[b] * factor, 1.0, 1e6)
            else:
                self.scales[b] = np.clip(self.scales[b] * factor, 1e-4, 50.0)
            self._batch[b] = None

    def reset_counters(self):
        for b in MH_BLOCKS:
            self.n_accept[b] = 0
            self.n_tried[b] = 0

    def acceptance(self):
        return {b: self.n_accept[b] / self.n_tried[b] for b in MH_BLOCKS if self.n_tried[b]}


# ---------------------------------------------------------------------------
# draws and summaries


@dataclass
class PosteriorDraws:
    """Retained draws, ``blocks[name]`` shaped ``(n_chains, n_keep, *param_shape)``."""

    blocks: dict
    acceptance: dict
    spec: ModelSpec
    data_shape: tuple
    species_ids: tuple = ()
    site_ids: tuple = ()
    years: tuple = ()

    @property
    def n_chains(self):
        return next(iter(self.blocks.values())).shape[0]

    @property
    def n_keep(self):
        return next(iter(self.blocks.values())).shape[1]

    def pooled(self, name):
        arr = self.blocks[name]
        return arr.reshape((-1,) + arr.shape[2:])

    def posterior_mean(self, name):
        return self.pooled(name).mean(axis=0)

    def scalar_columns(self, include_latent=True):
        """Flatten every block to scalar series ``name[idx] -> (chains, n_keep)``."""
        out = {}
        for name, arr in self.blocks.items():
            if name == "N" and not include_latent:
                continue
            shp = arr.shape[2:]
            if name == "Sigma_a":
                iu = np.triu_indices(shp[0])
                for r, c in zip(*iu):
                    out[f"Sigma_a[{r},{c}]"] = arr[:, :, r, c]
                continue
            if not shp:
                out[name] = arr
                continue
            for idx in np.ndindex(*shp):
                out[f"{name}[{','.join(map(str, idx))}]"] = arr[(slice(None), slice(None)) + idx]
        return out

    def to_csv(self, path, include_latent=True):
        """Flat long CSV with columns ``chain, iteration, parameter, value``."""
        cols = self.scalar_columns(include_latent)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration", "parameter", "value"])
            for c in range(self.n_chains):
                for name, arr in cols.items():
                    for it, v in enumerate(arr[c]):
                        w.writerow([c, it, name, repr(float(v))])


def _split_chains(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[1]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def rhat(draws) -> float | np.ndarray:
    """Split-chain potential scale reduction factor.

    ``draws`` has shape ``(n_chains, n_draws)`` or ``(n_chains, n_draws, m)``
    for ``m`` scalars at once. Chains are halved, so ``2 * n_chains``
    sequences enter the between/within variance comparison. When the
    within-chain variance is zero the result is 1 if the sequences agree
    and infinity otherwise.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError("rhat needs at least two chains")
    if x.shape[1] < 4:
        raise ValueError("rhat needs at least four draws per chain")
    x = _split_chains(x)
    m, n = x.shape[:2]
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / W)
    tol = 1e-12 * np.maximum(1.0, np.abs(means).max(axis=0))
    out = np.where(W > 0, out, np.where(np.sqrt(B / n) <= tol, 1.0, np.inf))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class PosteriorSummary:
    """Per-scalar posterior table (mean, sd, quantiles, R-hat) plus flags."""

    table: pd.DataFrame
    flagged: list
    rhat_threshold: float

    def __getitem__(self, name):
        return self.table.loc[name]

    def block(self, prefix):
        idx = [n for n in self.table.index if n == prefix or n.startswith(prefix + "[")]
        return self.table.loc[idx]

    def to_csv(self, path):
        self.table.to_csv(path, index_label="parameter", float_format="%.10g")


def summarize(draws: PosteriorDraws, rhat_threshold=1.05) -> PosteriorSummary:
    cols = draws.scalar_columns()
    names = list(cols)
    arr = np.stack([cols[n] for n in names], axis=-1)  # (chains, n_keep, m)
    pooled = arr.reshape(-1, arr.shape[-1])
    qs = np.quantile(pooled, QUANTILES, axis=0)
    if arr.shape[0] >= 2 and arr.shape[1] >= 4:
        rh = rhat(arr)
    else:
        rh = np.full(len(names), np.nan)
    table = pd.DataFrame({"mean": pooled.mean(axis=0), "sd": pooled.std(axis=0, ddof=1) if len(pooled) > 1 else 0.0},
                         index=pd.Index(names, name="parameter"))
    for col, q in zip(QUANTILE_COLUMNS, qs):
        table[col] = q
    table["rhat"] = rh
    latent = np.array([n.startswith("N[") for n in names])
    flagged = [n for n, r, lat in zip(names, rh, latent) if not lat and r >= rhat_threshold]
    return PosteriorSummary(table=table, flagged=flagged, rhat_threshold=rhat_threshold)


# ---------------------------------------------------------------------------
# fit


def _block_values(state: ChainState):
    p = state.params
    out = {"mu_a": p.mu_a, "Sigma_a": p.Sigma_a, "a": p.a, "p": special.expit(p.logit_p)}
    if p.beta.size:
        out["beta"] = p.beta
    if p.b_cov.size:
        out["b_cov"] = p.b_cov
    if p.theta is not None:
        out["theta"] = np.asarray(p.theta)
    if p.phi is not None:
        out["phi"] = p.phi
    return out


def run_chain(data, spec, cfg: SamplerConfig, chain_id: int):
    rng = RngStream(cfg.seed).child(chain_id)
    chain = Chain(data, spec, rng, scales=cfg.scales, fixed=cfg.fixed,
                  latent_update=cfg.latent_update)
    store = {}
    early = None
    n_batch = 0
    k = 0
    for it in range(cfg.n_iter):
        burning = it < cfg.n_burn
        chain.sweep(adapt=burning and cfg.adapt)
        if burning and cfg.adapt:
            n_batch += 1
            if n_batch == cfg.adapt_interval:
                chain.adapt_scales(n_batch)
                n_batch = 0
        if it + 1 == min(cfg.degenerate_window, cfg.n_iter):
            early = {b: chain.n_accept[b] for b in MH_BLOCKS if chain.n_tried[b]}
        if it + 1 == cfg.n_burn:
            chain.reset_counters()
        if not burning and (it - cfg.n_burn) % cfg.thin == cfg.thin - 1:
            vals = _block_values(chain.state)
            if cfg.store_latent:
                vals["N"] = chain.state.N
            for name, v in vals.items():
                if name not in store:
                    store[name] = np.empty((cfg.n_keep,) + np.shape(v), dtype=np.asarray(v).dtype)
                store[name][k] = v
            k += 1
    return store, chain.acceptance(), early or {}


def fit(data: Dataset, spec: ModelSpec, cfg: SamplerConfig | None = None):
    """Run ``cfg.n_chains`` independent chains and summarise the retained draws.

    Returns ``(PosteriorDraws, PosteriorSummary)``. Chains use independent
    streams derived from ``cfg.seed`` so a fixed seed reproduces the draws
    exactly.
    """
    cfg = SamplerConfig() if cfg is None else cfg
    if spec.autoregressive and data.K < 2:
        raise ValueError("autoregressive models need K >= 2 years")
    per_chain = [run_chain(data, spec, cfg, c) for c in range(cfg.n_chains)]
    early = [e for _, _, e in per_chain]
    for b in MH_BLOCKS:
        if all(b in e for e in early) and all(e[b] == 0 for e in early):
            raise SamplerError(b, f"no proposal accepted in the first {cfg.degenerate_window} iterations of any chain")
    names = per_chain[0][0].keys()
    blocks = {n: np.stack([pc[0][n] for pc in per_chain]) for n in names}
    acceptance = {b: np.array([pc[1].get(b, np.nan) for pc in per_chain]) for b in per_chain[0][1]}
    draws = PosteriorDraws(blocks=blocks, acceptance=acceptance, spec=spec.resolved(data.S),
                           data_shape=data.Y.shape, species_ids=data.species_ids,
                           site_ids=data.site_ids, years=data.years)
    summary = summarize(draws, cfg.rhat_threshold)
    if summary.flagged:
        log.info("%d scalars with R-hat >= %.3g", len(summary.flagged), cfg.rhat_threshold)
    return draws, summary
