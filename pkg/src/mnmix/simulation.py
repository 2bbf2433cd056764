"""Scenario generator and simulation-study harness."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special

from .distributions import RngStream, rhurdle_poisson, rinvwishart, rmvnormal
from .model import Dataset, ModelSpec, Parameters, detection_shape, log_lambda, logit_p

__all__ = [
    "P_REGIMES",
    "LAMBDA_REGIMES",
    "Scenario",
    "GroundTruth",
    "lognormal_sigma2",
    "random_correlation",
    "simulate_dataset",
    "draw_prior",
    "simulate_counts",
    "replicate_metrics",
    "evaluate_replicate",
    "run_study",
]

log = logging.getLogger(__name__)

P_REGIMES = {"small": (0.1, 0.4), "large": (0.5, 0.9)}
# (median, sd) of the site-level abundance rate
LAMBDA_REGIMES = {"small": (7.0, 10.0), "large": (55.0, 74.0)}


def lognormal_sigma2(median, sd):
    """Log-scale variance of a log-normal with the given median and sd.

    With ``u = exp(sigma^2)`` the variance condition reads
    ``median^2 u (u - 1) = sd^2``; the positive root of that quadratic is used.
    """
    r2 = (sd / median) ** 2
    u = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * r2))
    return float(np.log(u))


def random_correlation(S, bound, rng, floor=0.05):
    """Random correlation matrix with off-diagonals drawn on ``[-bound, bound]``.

    Eigenvalues are clipped at ``floor`` to force positive definiteness and
    the result is renormalised to a unit diagonal.
    """
    C = np.eye(S)
    iu = np.triu_indices(S, 1)
    C[iu] = rng.uniform(-bound, bound, size=len(iu[0]))
    C = np.triu(C) + np.triu(C, 1).T
    w, V = np.linalg.eigh(C)
    if w.min() < floor:
        C = (V * np.maximum(w, floor)) @ V.T
        d = np.sqrt(np.diag(C))
        C = C / np.outer(d, d)
    return 0.5 * (C + C.T)


@dataclass
class Scenario:
    """One cell of the simulation design.

    ``p_regime`` and ``lam_regime`` are ``"small"`` or ``"large"``;
    ``theta`` applies to hurdle models only and ``phi`` optionally fixes
    the autoregressive coefficients instead of drawing them.
    """

    R: int = 10
    T: int = 5
    S: int = 5
    K: int = 5
    p_regime: str = "large"
    lam_regime: str = "large"
    theta: float | None = None
    replicates: int = 20
    seed: int = 0
    corr_bound: float = 0.6
    phi: float | None = None
    phi_sd: float = 0.25
    name: str = ""

    def __post_init__(self):
        if self.p_regime not in P_REGIMES:
            raise ValueError(f"unknown p regime {self.p_regime!r}")
        if self.lam_regime not in LAMBDA_REGIMES:
            raise ValueError(f"unknown lambda regime {self.lam_regime!r}")
        if min(self.R, self.T, self.S, self.K) < 1:
            raise ValueError("scenario dimensions must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @property
    def median_p(self):
        lo, hi = P_REGIMES[self.p_regime]
        return 0.5 * (lo + hi)

    @property
    def median_lambda(self):
        return LAMBDA_REGIMES[self.lam_regime][0]

    @property
    def design_key(self):
        """Identifies the design cell without the zero probability.

        Random streams derive from this key, so scenarios that differ only
        in ``theta`` share their random effects and detection draws.
        """
        return f"R{self.R}T{self.T}S{self.S}K{self.K}_p{self.p_regime}_l{self.lam_regime}"

    @property
    def key(self):
        if self.name:
            return self.name
        th = "-" if self.theta is None else f"{self.theta:g}"
        return f"R{self.R}T{self.T}S{self.S}K{self.K}_p{self.p_regime}_l{self.lam_regime}_th{th}"

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    N: np.ndarray
    a: np.ndarray
    mu_a: np.ndarray
    Sigma_a: np.ndarray
    p: np.ndarray
    theta: float | None = None
    phi: np.ndarray | None = None

    @property
    def corr(self):
        d = np.sqrt(np.diag(self.Sigma_a))
        return self.Sigma_a / np.outer(d, d)

    def to_dict(self):
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return out

    @classmethod
    def from_dict(cls, d):
        arr = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**arr)


def _generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def simulate_dataset(spec: ModelSpec, scen: Scenario, rng):
    """Draw one replicate ``(Dataset, GroundTruth)`` for a model variant.

    Random effects follow ``MVN(log(median) 1, D C D)`` with the log-scale
    variance matched to the regime's sd and a random correlation ``C``;
    detection cells are uniform on the regime interval; latent abundances
    follow the variant's generative process year by year; counts are
    binomial thinnings over ``T`` occasions. Non-AR variants with ``K > 1``
    draw each year's abundance independently from the same rate.
    """
    g = _generator(rng)
    if scen.theta is not None and not spec.hurdle:
        raise ValueError("theta only applies to hurdle models")
    if spec.hurdle and scen.theta is None:
        raise ValueError("hurdle models need a scenario theta")
    if spec.autoregressive and scen.K < 2:
        raise ValueError("autoregressive models need K >= 2")
    R, T, S, K = scen.R, scen.T, scen.S, scen.K
    median, sd = LAMBDA_REGIMES[scen.lam_regime]
    sigma2 = lognormal_sigma2(median, sd)
    mu_a = np.full(S, np.log(median))
    C = random_correlation(S, scen.corr_bound, g)
    Sigma_a = sigma2 * C
    a = np.asarray(rmvnormal(mu_a, Sigma_a, g, size=R)).reshape(R, S)

    lo, hi = P_REGIMES[scen.p_regime]
    dim = spec.effective_dim(K)
    p = g.uniform(lo, hi, size=detection_shape(dim, R, K, S))

    phi = None
    if spec.autoregressive:
        if scen.phi is not None:
            phi = np.full(S, float(scen.phi))
        else:
            phi = g.normal(0.0, scen.phi_sd, size=S)
            bad = np.abs(phi) >= 1
            while np.any(bad):
                phi[bad] = g.normal(0.0, scen.phi_sd, size=int(bad.sum()))
                bad = np.abs(phi) >= 1

    N = np.zeros((R, K, S), dtype=np.int64)
    for k in range(K):
        loglam = a.copy()
        if spec.autoregressive and k > 0:
            loglam = loglam + phi * np.log1p(N[:, k - 1])
        lam = np.exp(loglam)
        if spec.hurdle:
            N[:, k] = rhurdle_poisson(lam, scen.theta, g)
        else:
            N[:, k] = g.poisson(lam)

    if dim == "A":
        p_full = p[:, None, :, :]
    elif dim == "B":
        p_full = p[:, None, None, :]
    else:
        p_full = p[None, None, None, :]
    Y = g.binomial(np.broadcast_to(N[:, None, :, :], (R, T, K, S)), np.broadcast_to(p_full, (R, T, K, S)))
    data = Dataset(Y=Y)
    truth = GroundTruth(N=N, a=a, mu_a=mu_a, Sigma_a=Sigma_a, p=p,
                        theta=scen.theta if spec.hurdle else None, phi=phi)
    return data, truth


def draw_prior(spec: ModelSpec, R, K, S, rng, q_lambda=0, q_p=0):
    """One draw of every parameter from the model's prior.

    Detection logits follow the standard logistic law (uniform ``p``) and
    regression coefficients their ``N(0, var)`` priors.
    """
    g = _generator(rng)
    sp = spec.resolved(S)
    mu_a = rmvnormal(sp.mu0, sp.Sigma0, g)
    Sigma_a = rinvwishart(sp.Omega, sp.nu, g)
    a = np.asarray(rmvnormal(mu_a, Sigma_a, g, size=R)).reshape(R, S)
    dim = sp.effective_dim(K)
    lp = g.logistic(size=detection_shape(dim, R, K, S))
    params = Parameters(
        a=a, mu_a=np.asarray(mu_a), Sigma_a=Sigma_a, logit_p=lp,
        beta=g.normal(0.0, np.sqrt(sp.beta_var), size=(S, q_lambda)),
        b_cov=g.normal(0.0, np.sqrt(sp.bcov_var), size=(S, q_p)),
        theta=float(g.beta(*sp.theta_shapes)) if sp.hurdle else None,
        phi=(sp.mu_phi + np.sqrt(np.diag(sp.Sigma_phi)) * g.standard_normal(S)) if sp.autoregressive else None,
    )
    return params


def simulate_counts(params: Parameters, spec: ModelSpec, R, T, K, rng, X=None, Z=None):
    """Draw latent abundances and counts given every parameter.

    Returns ``(N, Y)`` with shapes ``(R, K, S)`` and ``(R, T, K, S)``.
    """
    g = _generator(rng)
    S = params.a.shape[1]
    shell = Dataset(Y=np.zeros((R, T, K, S), dtype=np.int64), X=X, Z=Z)
    base = log_lambda(params, shell, replace(spec, autoregressive=False))
    N = np.zeros((R, K, S), dtype=np.int64)
    for k in range(K):
        ll = base[:, k]
        if spec.autoregressive and k > 0:
            ll = ll + params.phi * np.log1p(N[:, k - 1])
        lam = np.exp(ll)
        N[:, k] = rhurdle_poisson(lam, params.theta, g) if spec.hurdle else g.poisson(lam)
    p = special.expit(np.broadcast_to(logit_p(params, shell, spec), (R, T, K, S)))
    Y = g.binomial(np.broadcast_to(N[:, None], (R, T, K, S)), p)
    return N, Y


# ---------------------------------------------------------------------------
# study harness


def replicate_streams(scen: Scenario, rep: int):
    """Data stream and sampler seed for one replicate of a scenario."""
    root = RngStream(scen.seed, (zlib.crc32(scen.design_key.encode()), rep))
    fit_seed = int(root.child(1).generator.integers(0, 2 ** 63 - 1))
    return root.child(0), fit_seed


def _block_of(name):
    return name.split("[", 1)[0]


def _inside(draws, truth, q=(0.25, 0.75)):
    lo, hi = np.quantile(draws, q, axis=0)
    return (lo <= truth) & (truth <= hi)


def replicate_metrics(draws, summary, truth: GroundTruth, spec: ModelSpec):
    """Agreement between one fitted replicate and its ground truth."""
    from .metrics import ccc, cmd, relative_bias

    out = {}
    out["ccc"] = ccc(draws.posterior_mean("N").ravel(), truth.N.ravel())
    Sig = draws.pooled("Sigma_a")
    d = np.sqrt(np.einsum("nii->ni", Sig))
    corr_hat = (Sig / (d[:, :, None] * d[:, None, :])).mean(axis=0)
    out["cmd"] = cmd(corr_hat, truth.corr)
    out["rb_p"] = relative_bias(draws.posterior_mean("p"), truth.p)
    out["rb_mu_a"] = relative_bias(draws.posterior_mean("mu_a"), truth.mu_a)
    iu = np.triu_indices(truth.Sigma_a.shape[0])
    out["cov_Sigma_a"] = float(np.mean(_inside(Sig[:, iu[0], iu[1]], truth.Sigma_a[iu])))
    out["cov_p"] = float(np.mean(_inside(draws.pooled("p"), truth.p)))
    out["cov_mu_a"] = float(np.mean(_inside(draws.pooled("mu_a"), truth.mu_a)))
    if spec.hurdle:
        out["rb_theta"] = relative_bias(draws.posterior_mean("theta"), truth.theta)
        out["cov_theta"] = float(np.mean(_inside(draws.pooled("theta"), truth.theta)))
    if spec.autoregressive:
        out["rb_phi"] = relative_bias(draws.posterior_mean("phi"), truth.phi)
        out["cov_phi"] = float(np.mean(_inside(draws.pooled("phi"), truth.phi)))
    out["rhat_flagged"] = tuple(sorted({_block_of(n) for n in summary.flagged}))
    return out


def evaluate_replicate(spec: ModelSpec, scen: Scenario, cfg, rep: int):
    """Simulate, fit and score replicate ``rep`` of a scenario."""
    from .sampler import fit

    data_rng, fit_seed = replicate_streams(scen, rep)
    data, truth = simulate_dataset(spec, scen, data_rng)
    draws, summary = fit(data, spec, replace(cfg, seed=fit_seed))
    return replicate_metrics(draws, summary, truth, spec)


def _safe_replicate(args):
    spec, scen, cfg, rep = args
    try:
        return evaluate_replicate(spec, scen, cfg, rep), None
    except Exception as exc:  # a failed replicate is counted, not fatal
        return None, f"{type(exc).__name__}: {exc}"


_RB_BLOCK = {"rb_p": "p", "rb_mu_a": "mu_a", "rb_theta": "theta", "rb_phi": "phi"}
_MEAN_KEYS = ("ccc", "cmd", "rb_p", "rb_mu_a", "rb_theta", "rb_phi",
              "cov_Sigma_a", "cov_p", "cov_mu_a", "cov_theta", "cov_phi")


def _aggregate(spec, scen, results):
    from .metrics import StudyMetricRow

    ok = [r for r, _ in results if r is not None]
    row = {"median_p": scen.median_p, "median_lambda": scen.median_lambda,
           "theta": scen.theta if spec.hurdle else None}
    for k in _MEAN_KEYS:
        applicable = not ((k.endswith("theta") and not spec.hurdle)
                          or (k.endswith("phi") and not spec.autoregressive))
        vals = [r[k] for r in ok if k in r]
        if vals:
            row[k] = float(np.mean(vals))
        else:
            row[k] = float("nan") if applicable else None
    flagged = set()
    for r in ok:
        flagged.update(r["rhat_flagged"])
    for k, block in _RB_BLOCK.items():
        if row.get(k) is not None and row[k] > 1.0:
            flagged.add(block)
    return StudyMetricRow(model=spec.name, scenario=scen.key, replicates=len(results),
                          failures=len(results) - len(ok), flagged=tuple(sorted(flagged)), **row)


def run_study(spec: ModelSpec, scenarios, cfg, n_jobs=1, return_replicates=False):
    """Simulate, fit and score every replicate of every scenario.

    Each replicate draws from its own stream keyed by the scenario design
    and replicate number, so results do not depend on the order of
    ``scenarios`` or on ``n_jobs``. A failing fit is logged and counted in
    the row's ``failures`` column instead of aborting the study.
    """
    tasks = [(spec, scen, cfg, rep) for scen in scenarios for rep in range(scen.replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_safe_replicate, tasks))
    else:
        results = [_safe_replicate(t) for t in tasks]
    rows, per_rep, i = [], [], 0
    for scen in scenarios:
        chunk = results[i:i + scen.replicates]
        i += scen.replicates
        for rep, (_, err) in enumerate(chunk):
            if err is not None:
                log.warning("scenario %s replicate %d failed: %s", scen.key, rep, err)
        rows.append(_aggregate(spec, scen, chunk))
        per_rep.append([r for r, _ in chunk])
    return (rows, per_rep) if return_replicates else rows
