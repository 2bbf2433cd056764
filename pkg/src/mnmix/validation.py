"""Self-consistency checks for the sampler.

:func:`geweke_check` runs the successive-conditional simulator. Starting
from a prior draw it alternates one posterior sweep with a fresh draw of
latent abundances and counts given the current parameters (an exact
Gibbs step on the joint). If every update leaves the posterior invariant,
the parameter marginals of that chain equal the prior marginals, which
are estimated independently by forward simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .distributions import RngStream
from .model import Dataset, ModelSpec
from .sampler import Chain, _refresh_loglam
from .simulation import draw_prior, simulate_counts

__all__ = ["GewekeResult", "geweke_check", "quantile_agreement"]

LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9)


def _summaries(params, N, hurdle):
    out = {
        "mu_a": params.mu_a,
        "Sigma_a": params.Sigma_a[np.triu_indices(params.Sigma_a.shape[0])],
        "a": params.a.ravel(),
        "p": special.expit(np.ravel(params.logit_p)),
        "N": np.log1p(N.ravel()),
    }
    if params.theta is not None:
        out["theta"] = np.array([params.theta])
    if params.phi is not None:
        out["phi"] = params.phi
    return out


def quantile_agreement(sample, reference, levels=LEVELS):
    """Largest ``|F_ref(q_alpha(sample)) - alpha|`` over the given levels.

    ``F_ref`` is the empirical CDF of ``reference`` (mid-rank for ties, so
    discrete margins are handled).
    """
    ref = np.sort(np.asarray(reference, dtype=float))
    q = np.quantile(np.asarray(sample, dtype=float), levels, method="inverted_cdf")
    lo = np.searchsorted(ref, q, side="left")
    hi = np.searchsorted(ref, q, side="right")
    n = len(ref)
    # any alpha within the CDF jump at a discrete atom is attained exactly
    F_lo, F_hi = lo / n, hi / n
    lv = np.asarray(levels)
    err = np.where(lv < F_lo, F_lo - lv, np.where(lv > F_hi, lv - F_hi, 0.0))
    return float(err.max())


@dataclass
class GewekeResult:
    chain: dict       # block -> (n_cycles, m) successive-conditional draws
    forward: dict     # block -> (n_forward, m) independent prior draws
    acceptance: dict

    def errors(self, levels=LEVELS):
        """Worst quantile disagreement per block (over all its scalars)."""
        out = {}
        for name, c in self.chain.items():
            f = self.forward[name]
            out[name] = max(quantile_agreement(c[:, j], f[:, j], levels) for j in range(c.shape[1]))
        return out


def geweke_check(spec: ModelSpec, R, T, K, S, n_cycles, seed=0, n_forward=None, warmup=2000,
                 latent_update="auto"):
    """Successive-conditional and forward simulators for one model variant.

    The chain first runs ``warmup`` adaptive cycles (discarded) so the
    proposal scales are tuned, then ``n_cycles`` recorded cycles with the
    scales frozen.
    """
    root = RngStream(seed)
    g_fwd = root.child(0).generator
    n_forward = n_cycles if n_forward is None else n_forward
    forward = {}
    for _ in range(n_forward):
        params = draw_prior(spec, R, K, S, g_fwd)
        N, _ = simulate_counts(params, spec, R, T, K, g_fwd)
        for name, v in _summaries(params, N, spec.hurdle).items():
            forward.setdefault(name, []).append(v)
    forward = {k: np.array(v) for k, v in forward.items()}

    g = root.child(1).generator
    params = draw_prior(spec, R, K, S, g)
    N, Y = simulate_counts(params, spec, R, T, K, g)
    chain = Chain(Dataset(Y=Y), spec, g, init=params, init_N=N, latent_update=latent_update)
    recorded = {}
    for it in range(warmup + n_cycles):
        adapt = it < warmup
        chain.sweep(adapt=adapt)
        if adapt and it % 50 == 49:
            chain.adapt_scales(50)
        if it == warmup - 1:
            chain.reset_counters()
        st = chain.state
        if not adapt:
            for name, v in _summaries(st.params, st.N, spec.hurdle).items():
                recorded.setdefault(name, []).append(np.array(v, dtype=float))
        # fresh (N, Y) from their forward law: a Gibbs step on the joint
        N, Y = simulate_counts(st.params, chain.spec, R, T, K, g)
        st.N = N
        _refresh_loglam(st)
        chain.set_counts(Y)
    rec = {k: np.array(v) for k, v in recorded.items()}
    return GewekeResult(chain=rec, forward=forward, acceptance=chain.acceptance())
