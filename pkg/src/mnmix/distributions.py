"""Seedable sampling and density helpers used by the models and priors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "RngStream",
    "rztpoisson",
    "rhurdle_poisson",
    "rmvnormal",
    "rinvwishart",
    "sample_suite",
    "ztpoisson_logpmf",
    "lognormal_moment_vector",
]

ZTP_INVERSION_MAX = 30.0


class DomainError(ValueError):
    """Raised when a distribution parameter lies outside its domain."""


@dataclass
class RngStream:
    """A reproducible random stream identified by ``(seed, stream)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys,
    so distinct stream ids (and children of a stream) give statistically
    independent PCG64 generators.
    """

    seed: int
    stream: tuple[int, ...] | int = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.stream, int):
            self.stream = (self.stream,)
        self.stream = tuple(int(s) for s in self.stream)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=self.stream)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(int(k) for k in key))


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def ztpoisson_logpmf(n, lam):
    """Zero-truncated Poisson log-pmf; ``-inf`` at ``n <= 0``."""
    n = np.asarray(n, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = n * np.log(lam) - lam - special.gammaln(n + 1) - np.log(-np.expm1(-lam))
    return np.where(n >= 1, out, -np.inf)


def rztpoisson(lam, rng, size=None):
    """Draw zero-truncated Poisson variates.

    Rates up to 30 use inverse-CDF sequential summation of the truncated
    pmf; larger rates redraw Poisson zeros, which occur with probability
    ``exp(-lam)``.
    """
    g = _gen(rng)
    lam = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise DomainError("zero-truncated Poisson needs finite lam > 0")
    if size is None:
        size = lam.shape
    lam = np.broadcast_to(lam, size)
    out = np.empty(size, dtype=np.int64)

    small = lam <= ZTP_INVERSION_MAX
    if np.any(small):
        ls = lam[small]
        u = g.random(ls.shape)
        # target in unnormalised units: u * (1 - e^-lam)
        target = u * -np.expm1(-ls)
        k = np.ones(ls.shape, dtype=np.int64)
        pmf = ls * np.exp(-ls)
        cdf = pmf.copy()
        active = cdf < target
        while np.any(active):
            k[active] += 1
            pmf[active] *= ls[active] / k[active]
            cdf[active] += pmf[active]
            # guard against floating-point stall far in the tail
            active &= (cdf < target) & (pmf > 0)
        out[small] = k
    if np.any(~small):
        lb = lam[~small]
        draws = g.poisson(lb)
        zero = draws == 0
        while np.any(zero):
            draws[zero] = g.poisson(lb[zero])
            zero = draws == 0
        out[~small] = draws
    return out


def rhurdle_poisson(lam, theta, rng, size=None):
    """Zero with probability ``theta``, otherwise a zero-truncated Poisson draw."""
    if not 0.0 <= theta <= 1.0:
        raise DomainError("theta must lie in [0, 1]")
    g = _gen(rng)
    lam = np.asarray(lam, dtype=float)
    if size is None:
        size = lam.shape
    occupied = g.random(size) >= theta
    counts = rztpoisson(np.broadcast_to(lam, size), g, size)
    return np.where(occupied, counts, 0)


def rmvnormal(mean, cov, rng, size=None):
    """Multivariate normal draws through a Cholesky factor of ``cov``."""
    g = _gen(rng)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is not positive definite") from exc
    shape = (() if size is None else tuple(np.atleast_1d(size))) + mean.shape
    z = g.standard_normal(shape)
    return mean + z @ L.T


def rinvwishart(scale, df, rng):
    """One inverse-Wishart draw via the Bartlett decomposition.

    If ``W ~ Wishart(scale^-1, df)`` then ``W^-1 ~ InverseWishart(scale, df)``;
    with ``scale^-1 = L L^T`` and Bartlett factor ``A``, ``W = (LA)(LA)^T`` and
    the returned matrix is ``(LA)^-T (LA)^-1``.
    """
    g = _gen(rng)
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df < p:
        raise DomainError(f"inverse-Wishart needs df >= dimension ({df} < {p})")
    try:
        c = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise DomainError("inverse-Wishart scale is not positive definite") from exc
    # scale^-1 = C^-T C^-1, so L = C^-T is an upper-triangular factor; any
    # square root works for Bartlett: scale^-1 = (C^-T)(C^-T)^T.
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(g.chisquare(df - np.arange(p)))
    il = np.tril_indices(p, -1)
    A[il] = g.standard_normal(len(il[0]))
    # (LA)^-1 = A^-1 L^-1 = A^-1 C^T
    M = np.linalg.solve(A, c.T)
    out = M.T @ M
    return 0.5 * (out + out.T)


def sample_suite(dist: str, params: dict, rng, size=None):
    """Dispatch a draw from one of the named laws used by the models.

    ``dist`` is one of ``Poisson``, ``Binomial``, ``Beta``, ``MVNormal``,
    ``InverseWishart``, ``ZeroTruncatedPoisson`` or ``HurdlePoisson``.
    Parameters are validated before any random number is consumed.
    """
    g = _gen(rng)
    key = dist.lower().replace("_", "").replace("-", "")
    if key == "poisson":
        lam = np.asarray(params["lam"], dtype=float)
        if np.any(lam < 0) or np.any(~np.isfinite(lam)):
            raise DomainError("Poisson needs finite lam >= 0")
        return g.poisson(lam, size)
    if key == "binomial":
        n, p = np.asarray(params["n"]), np.asarray(params["p"], dtype=float)
        if np.any(n < 0) or np.any((p < 0) | (p > 1)):
            raise DomainError("Binomial needs n >= 0 and p in [0, 1]")
        return g.binomial(n, p, size)
    if key == "beta":
        a, b = float(params["a"]), float(params["b"])
        if a <= 0 or b <= 0:
            raise DomainError("Beta shapes must be positive")
        return g.beta(a, b, size)
    if key == "mvnormal":
        return rmvnormal(params["mean"], params["cov"], g, size)
    if key == "inversewishart":
        if size is None:
            return rinvwishart(params["scale"], params["df"], g)
        return np.stack([rinvwishart(params["scale"], params["df"], g) for _ in range(int(size))])
    if key == "zerotruncatedpoisson":
        return rztpoisson(params["lam"], g, size)
    if key == "hurdlepoisson":
        lam = np.asarray(params["lam"], dtype=float)
        if np.any(lam <= 0):
            raise DomainError("hurdle Poisson needs lam > 0")
        return rhurdle_poisson(lam, float(params["theta"]), g, size)
    raise DomainError(f"unknown distribution {dist!r}")


def lognormal_moment_vector(mu, sigma):
    """Mean, variance and covariance of ``exp(X)`` for ``X ~ MVN(mu, sigma)``.

    Returns ``(E, Var, Cov)`` with ``Cov`` carrying ``Var`` on its diagonal.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = np.diag(sigma)
    with np.errstate(over="raise"):
        try:
            E = np.exp(mu + 0.5 * d)
            cov = np.outer(E, E) * np.expm1(sigma)
        except FloatingPointError as exc:
            raise OverflowError("log-normal moments overflow") from exc
    if not (np.all(np.isfinite(E)) and np.all(np.isfinite(cov))):
        raise OverflowError("log-normal moments overflow")
    cov = 0.5 * (cov + cov.T)
    return E, np.diag(cov).copy(), cov
