"""Enumeration of per-cell latent abundance conditionals.

For non-autoregressive models each latent cell ``N`` has full conditional

    f(n) = P(N = n | lambda, theta) * prod_t Binomial(Y_t | n, p_t)

which is log-concave in ``n`` and therefore unimodal. :func:`enumerate_cells`
locates the mode of every cell, lays a window of ``width_sd`` approximate
standard deviations around it and evaluates ``f`` on the concatenation of
all windows. The result gives both the per-cell marginal
``sum_n f(n)`` (used for collapsed updates and likelihoods) and exact
draws from the normalised conditional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = ["LatentGrid", "enumerate_cells"]


@dataclass
class LatentGrid:
    """Flattened per-cell windows of the latent conditional."""

    shape: tuple
    n: np.ndarray        # state values, concatenated over cells
    logf: np.ndarray     # unnormalised log-conditional at each state
    starts: np.ndarray   # start offset of each cell's segment
    logm: np.ndarray     # per-cell log marginal, shape ``shape``

    def sample(self, rng):
        """Exact draw of every cell from its normalised window."""
        seg = np.repeat(np.arange(len(self.starts)), np.diff(np.append(self.starts, len(self.n))))
        w = np.exp(self.logf - self.logm.ravel()[seg])
        cw = np.cumsum(w)
        base = np.where(self.starts > 0, cw[self.starts - 1], 0.0)
        ends = np.append(self.starts[1:], len(self.n)) - 1
        total = cw[ends] - base
        u = rng.random(len(self.starts)) * total
        idx = np.searchsorted(cw, base + u, side="right")
        idx = np.minimum(np.maximum(idx, self.starts), ends)
        return self.n[idx].reshape(self.shape)


def _ratio(lam, Y, sum_log1mp, x, T):
    """``log f(x + 1) - log f(x)`` extended to real ``x`` with its derivative."""
    xp = x[:, None] + 1.0 - Y
    r = np.log(lam) + (T - 1) * np.log(x + 1.0) - np.log(xp).sum(axis=1) + sum_log1mp
    dr = (T - 1) / (x + 1.0) - (1.0 / xp).sum(axis=1)
    return r, dr


def _mode_and_sd(lam, Y, log1mp, lower):
    """Continuous mode and curvature-based sd of the unimodal conditional.

    The log-ratio ``r`` is convex and decreasing in ``x``, so Newton steps
    started left of its root increase monotonically towards it. The mode is
    that root, or ``lower`` when ``r`` is already negative there.
    """
    T = Y.shape[1]
    s1 = log1mp.sum(axis=1)
    mode = lower.astype(float).copy()
    r, dr = _ratio(lam, Y, s1, mode, T)
    idx = np.flatnonzero(r > 0)
    for _ in range(100):
        if idx.size == 0:
            break
        step = -r[idx] / np.minimum(dr[idx], -1e-300)
        mode[idx] += step
        r_i, dr_i = _ratio(lam[idx], Y[idx], s1[idx], mode[idx], T)
        r[idx], dr[idx] = r_i, dr_i
        idx = idx[(step > 0.01) & (r_i > 0)]
    x = mode + 1.0
    curv = 1.0 / x + (Y / (x[:, None] * np.maximum(x[:, None] - Y, 0.5))).sum(axis=1)
    return mode, 1.0 / np.sqrt(curv)


def enumerate_cells(loglam, lp, Y, hurdle=False, theta=None, width_sd=8.0, margin=4):
    """Evaluate every cell's latent conditional on a window around its mode.

    ``loglam`` has shape ``(R, K, S)``; ``lp`` are detection logits
    broadcastable to ``Y`` of shape ``(R, T, K, S)``. Under the hurdle the
    zero state is included for cells whose counts are all zero.
    """
    shape = loglam.shape
    R, T, K, S = Y.shape
    lam = np.exp(loglam).ravel()
    Yc = np.moveaxis(np.asarray(Y, dtype=float), 1, -1).reshape(-1, T)
    lpc = np.moveaxis(np.broadcast_to(lp, (R, lp.shape[1], K, S)), 1, -1).reshape(-1, lp.shape[1])
    lpc = np.broadcast_to(lpc, Yc.shape)
    log_p = -np.logaddexp(0.0, -lpc)
    log1mp = -np.logaddexp(0.0, lpc)
    maxY = Yc.max(axis=1)
    lower = np.maximum(maxY, 1.0) if hurdle else maxY
    mode, sd = _mode_and_sd(lam, Yc, log1mp, lower)
    half = np.ceil(width_sd * sd) + margin
    lo = np.maximum(lower, np.floor(mode - half))
    hi = np.ceil(mode + half)
    zero_state = hurdle & (maxY == 0)
    zero_state = np.broadcast_to(zero_state, maxY.shape)
    lengths = (hi - lo + 1).astype(np.int64) + zero_state
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    total = int(lengths.sum())
    seg = np.repeat(np.arange(len(lengths)), lengths)
    pos = np.arange(total) - starts[seg]
    n = lo[seg] + pos - zero_state[seg]
    n = np.where(zero_state[seg] & (pos == 0), 0.0, n)

    # log f at the first positive state of each cell, then cumulative
    # log-ratios along the window (only logarithms per state)
    first = lo
    lgY = special.gammaln(Yc + 1.0).sum(axis=1)
    f0 = (first * loglam.ravel() - lam - special.gammaln(first + 1.0)
          + T * special.gammaln(first + 1.0) - special.gammaln(first[:, None] - Yc + 1.0).sum(axis=1) - lgY
          + (Yc * log_p).sum(axis=1) + ((first[:, None] - Yc) * log1mp).sum(axis=1))
    j = n - 1.0  # ratio r(j) = log f(j + 1) - log f(j), used for states above ``first``
    jp1 = np.maximum(j + 1.0, 1.0)
    if T * np.log10(jp1.max() + 1.0) < 280.0:
        # one logarithm of the product instead of T logarithms
        prod = np.ones(total)
        for t in range(T):
            prod *= np.maximum(jp1 - Yc[:, t][seg], 1.0)
        slog = np.log(prod)
    else:
        slog = np.zeros(total)
        for t in range(T):
            slog += np.log(np.maximum(jp1 - Yc[:, t][seg], 1.0))
    r = loglam.ravel()[seg] + (T - 1) * np.log(jp1) - slog + log1mp.sum(axis=1)[seg]
    is_first = n == first[seg]
    zero_here = n < first[seg]
    r = np.where(is_first | zero_here, 0.0, r)
    cs = np.cumsum(r)
    base = cs[starts + zero_state]
    logf = f0[seg] + cs - base[seg]
    if hurdle:
        with np.errstate(divide="ignore"):
            shift = np.log1p(-theta) - np.log(-np.expm1(-lam))
        logf = logf + shift[seg]
        logf = np.where(zero_here, np.log(theta), logf)

    mx = np.maximum.reduceat(logf, starts)
    sums = np.add.reduceat(np.exp(logf - mx[seg]), starts)
    logm = mx + np.log(sums)
    return LatentGrid(shape=shape, n=n.astype(np.int64), logf=logf, starts=starts, logm=logm.reshape(shape))
