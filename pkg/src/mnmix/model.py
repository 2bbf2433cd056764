"""Multi-species N-mixture model: data containers, linear predictors and
log-densities for the base, hurdle, autoregressive and hurdle-AR variants.

Array conventions used throughout the package (0-based indices):

* counts ``Y`` have shape ``(R, T, K, S)``: site, occasion, year, species;
* latent abundances ``N`` have shape ``(R, K, S)``;
* random effects ``a`` have shape ``(R, S)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

__all__ = [
    "InvalidStateError",
    "Dataset",
    "ModelSpec",
    "Parameters",
    "detection_shape",
    "compute_lambda",
    "compute_p",
    "loglik_observation",
    "logpmf_latent",
    "log_lambda",
    "logit_p",
    "latent_logpmf_cells",
    "obs_loglik_cells",
    "standardize",
]

DETECTION_DIMS = ("A", "B", "C")


class InvalidStateError(FloatingPointError):
    """A model quantity became non-finite."""


def standardize(x):
    """Center columns to zero mean and scale to unit (population) variance."""
    x = np.asarray(x, dtype=float)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - x.mean(axis=0)) / sd


@dataclass(frozen=True)
class Dataset:
    """Observed counts plus abundance (``X``) and detection (``Z``) covariates.

    ``X`` has shape ``(R, q_lambda)`` and ``Z`` has shape ``(R, T, q_p)``.
    Covariates are expected to be standardized already; :func:`standardize`
    does this and ingestion applies it.
    """

    Y: np.ndarray
    X: np.ndarray | None = None
    Z: np.ndarray | None = None
    site_ids: tuple = ()
    years: tuple = ()
    species_ids: tuple = ()

    def __post_init__(self):
        Y = np.asarray(self.Y)
        if Y.ndim == 3:
            Y = Y[:, :, None, :]
        if Y.ndim != 4:
            raise ValueError("Y must have shape (R, T, K, S) or (R, T, S)")
        if not np.issubdtype(Y.dtype, np.integer):
            if np.any(Y != np.round(Y)):
                raise ValueError("counts must be integers")
        Y = Y.astype(np.int64)
        if np.any(Y < 0):
            raise ValueError("counts must be non-negative")
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        R, T, K, S = Y.shape
        X = self.X
        if X is not None:
            X = np.asarray(X, dtype=float).reshape(R, -1)
            if not np.all(np.isfinite(X)):
                raise ValueError("abundance covariates contain missing values")
            if X.shape[1] == 0:
                X = None
        Z = self.Z
        if Z is not None:
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 2:
                Z = Z.reshape(R, T, -1)
            if Z.shape[:2] != (R, T):
                raise ValueError("detection covariates must have shape (R, T, q_p)")
            if not np.all(np.isfinite(Z)):
                raise ValueError("detection covariates contain missing values")
            if Z.shape[2] == 0:
                Z = None
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if not self.site_ids:
            object.__setattr__(self, "site_ids", tuple(str(i) for i in range(R)))
        if not self.years:
            object.__setattr__(self, "years", tuple(range(1, K + 1)))
        if not self.species_ids:
            object.__setattr__(self, "species_ids", tuple(str(s) for s in range(S)))
        if (len(self.site_ids), len(self.years), len(self.species_ids)) != (R, K, S):
            raise ValueError("label tuples do not match count dimensions")

    @property
    def R(self):
        return self.Y.shape[0]

    @property
    def T(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return self.Y.shape[2]

    @property
    def S(self):
        return self.Y.shape[3]

    @property
    def q_lambda(self):
        return 0 if self.X is None else self.X.shape[1]

    @property
    def q_p(self):
        return 0 if self.Z is None else self.Z.shape[2]

    @property
    def max_count(self):
        """Per-cell lower bound on ``N``: max over occasions, shape ``(R, K, S)``."""
        return self.Y.max(axis=1)

    @property
    def zero_fraction(self):
        return float(np.mean(self.Y == 0))


@dataclass(frozen=True)
class ModelSpec:
    """Variant flags, detection dimension and prior hyperparameters.

    Hyperparameters left as ``None`` take vague-but-proper defaults once
    :meth:`resolved` is called with the number of species.
    """

    hurdle: bool = False
    autoregressive: bool = False
    detection_dim: str = "C"
    mu0: np.ndarray | None = None
    Sigma0: np.ndarray | None = None
    Omega: np.ndarray | None = None
    nu: float | None = None
    theta_shapes: tuple[float, float] = (1.0, 1.0)
    mu_phi: np.ndarray | None = None
    Sigma_phi: np.ndarray | None = None
    beta_var: float = 10.0
    bcov_var: float = 10.0

    def __post_init__(self):
        dim = str(self.detection_dim).upper()
        if dim not in DETECTION_DIMS:
            raise ValueError(f"detection_dim must be one of {DETECTION_DIMS}")
        object.__setattr__(self, "detection_dim", dim)

    @property
    def name(self):
        base = "MNM"
        if self.hurdle:
            base += "-Hurdle"
        if self.autoregressive:
            base += "-AR"
        return f"{base}({self.detection_dim})"

    def resolved(self, S: int) -> "ModelSpec":
        """Return a copy with every hyperparameter filled in and validated."""
        mu0 = np.zeros(S) if self.mu0 is None else np.broadcast_to(np.asarray(self.mu0, float), (S,)).copy()
        Sigma0 = 10.0 * np.eye(S) if self.Sigma0 is None else _diag_matrix(self.Sigma0, S)
        Omega = np.eye(S) if self.Omega is None else _diag_matrix(self.Omega, S)
        nu = float(S + 1) if self.nu is None else float(self.nu)
        mu_phi = np.zeros(S) if self.mu_phi is None else np.broadcast_to(np.asarray(self.mu_phi, float), (S,)).copy()
        Sigma_phi = np.eye(S) if self.Sigma_phi is None else _diag_matrix(self.Sigma_phi, S)
        if nu < S + 1:
            raise ValueError(f"inverse-Wishart degrees of freedom must be >= S + 1 = {S + 1}")
        for name, m in (("Sigma0", Sigma0), ("Omega", Omega), ("Sigma_phi", Sigma_phi)):
            if np.any(np.diag(m) <= 0) or np.any(m != np.diag(np.diag(m))):
                raise ValueError(f"{name} must be a positive diagonal matrix")
        a, b = self.theta_shapes
        if a <= 0 or b <= 0:
            raise ValueError("Beta shapes must be positive")
        return replace(self, mu0=mu0, Sigma0=Sigma0, Omega=Omega, nu=nu,
                       mu_phi=mu_phi, Sigma_phi=Sigma_phi)

    def effective_dim(self, K: int) -> str:
        # dimension A with a single year is indistinguishable from B
        if self.detection_dim == "A" and K == 1:
            return "B"
        return self.detection_dim


def _diag_matrix(v, S):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return float(v) * np.eye(S)
    if v.ndim == 1:
        return np.diag(v)
    return v.copy()


def detection_shape(dim: str, R: int, K: int, S: int) -> tuple[int, ...]:
    """Shape of the logit-scale detection cells for a detection dimension."""
    return {"A": (R, K, S), "B": (R, S), "C": (S,)}[dim]


def _broadcast_detection(cells, dim):
    """Expand detection cells to shape broadcastable with ``(R, T, K, S)``."""
    cells = np.asarray(cells, dtype=float)
    if dim == "A":
        return cells[:, None, :, :]
    if dim == "B":
        return cells[:, None, None, :]
    return cells[None, None, None, :]


@dataclass
class Parameters:
    """Current values of every model parameter.

    ``logit_p`` holds detection cells sized by the detection dimension
    (A: ``(R, K, S)``, B: ``(R, S)``, C: ``(S,)``); ``b_cov`` are per-species
    coefficients on detection covariates and ``beta`` per-species abundance
    coefficients.
    """

    a: np.ndarray
    mu_a: np.ndarray
    Sigma_a: np.ndarray
    logit_p: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    theta: float | None = None
    phi: np.ndarray | None = None

    def copy(self) -> "Parameters":
        return Parameters(
            a=self.a.copy(), mu_a=self.mu_a.copy(), Sigma_a=self.Sigma_a.copy(),
            logit_p=np.array(self.logit_p, dtype=float), beta=self.beta.copy(),
            b_cov=self.b_cov.copy(), theta=self.theta,
            phi=None if self.phi is None else self.phi.copy(),
        )

    def check(self, spec: ModelSpec):
        if not np.allclose(self.Sigma_a, self.Sigma_a.T):
            raise InvalidStateError("Sigma_a is not symmetric")
        try:
            np.linalg.cholesky(self.Sigma_a)
        except np.linalg.LinAlgError as exc:
            raise InvalidStateError("Sigma_a is not positive definite") from exc
        if spec.hurdle and not (self.theta is not None and 0.0 < self.theta < 1.0):
            raise InvalidStateError("hurdle models need 0 < theta < 1")
        if not np.all(np.isfinite(self.logit_p)):
            raise InvalidStateError("non-finite detection logit")


# ---------------------------------------------------------------------------
# vectorised predictors and log-densities


def _xbeta(params: Parameters, data: Dataset):
    if data.X is None or params.beta.size == 0:
        return 0.0
    return data.X @ params.beta.T  # (R, S)


def log_lambda(params: Parameters, data: Dataset, spec: ModelSpec, N=None):
    """Log abundance rates for every cell, shape ``(R, K, S)``.

    For the autoregressive variants years after the first add
    ``phi_s * log(N_{i,k-1,s} + 1)``, so ``N`` must be supplied.
    """
    eta = params.a + _xbeta(params, data)
    out = np.repeat(eta[:, None, :], data.K, axis=1)
    if spec.autoregressive and data.K > 1:
        if N is None:
            raise ValueError("autoregressive rates need the latent abundances")
        out[:, 1:, :] += params.phi * np.log1p(N[:, :-1, :])
    return out


def logit_p(params: Parameters, data: Dataset, spec: ModelSpec):
    """Detection logits broadcastable to ``(R, T, K, S)``."""
    dim = spec.effective_dim(data.K)
    base = _broadcast_detection(params.logit_p, dim)
    if data.Z is not None and params.b_cov.size:
        base = base + np.einsum("itq,sq->its", data.Z, params.b_cov)[:, :, None, :]
    return base


def latent_logpmf_cells(N, loglam, theta=None, hurdle=False):
    """Elementwise latent log-pmf of ``N`` given log-rates."""
    N = np.asarray(N)
    lam = np.exp(loglam)
    base = N * loglam - lam - special.gammaln(N + 1.0)
    if not hurdle:
        return base
    with np.errstate(divide="ignore"):
        ztp = base - np.log(-np.expm1(-lam))
    return np.where(N == 0, np.log(theta), np.log1p(-theta) + ztp)


def obs_loglik_cells(Y, N, lp):
    """Binomial observation log-likelihood summed over occasions.

    ``Y`` is ``(R, T, K, S)``, ``N`` is ``(R, K, S)`` and ``lp`` detection
    logits broadcastable to ``Y``. Cells with ``Y > N`` give ``-inf``.
    """
    N4 = np.asarray(N)[:, None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        ll = (special.gammaln(N4 + 1.0) - special.gammaln(Y + 1.0) - special.gammaln(N4 - Y + 1.0)
              - Y * np.logaddexp(0.0, -lp) - (N4 - Y) * np.logaddexp(0.0, lp))
    ll = np.where(Y > N4, -np.inf, ll)
    return ll.sum(axis=1)


# ---------------------------------------------------------------------------
# scalar operations


def compute_lambda(params: Parameters, data: Dataset, spec: ModelSpec, i: int, k: int, s: int,
                   N_prev: int | None = None) -> float:
    """Abundance rate for site ``i``, year ``k`` and species ``s`` (0-based).

    ``N_prev`` is required exactly when the model is autoregressive and
    ``k > 0``.
    """
    ar_term = spec.autoregressive and k > 0
    if ar_term != (N_prev is not None):
        raise ValueError("N_prev must be given iff the model is autoregressive and k > 0")
    eta = params.a[i, s]
    if data.X is not None and params.beta.size:
        eta = eta + data.X[i] @ params.beta[s]
    if ar_term:
        if N_prev < 0:
            raise ValueError("N_prev must be non-negative")
        eta = eta + params.phi[s] * np.log1p(N_prev)
    with np.errstate(over="ignore"):
        lam = float(np.exp(eta))
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidStateError(f"lambda is not finite and positive (log-rate {eta})")
    return lam


def compute_p(params: Parameters, data: Dataset, spec: ModelSpec, i: int, t: int, k: int, s: int) -> float:
    """Detection probability for one (site, occasion, year, species) cell."""
    dim = spec.effective_dim(data.K)
    cells = np.asarray(params.logit_p)
    if dim == "A":
        eta = cells[i, k, s]
    elif dim == "B":
        eta = cells[i, s]
    else:
        eta = cells[s]
    if data.Z is not None and params.b_cov.size:
        eta = eta + data.Z[i, t] @ params.b_cov[s]
    return float(special.expit(eta))


def loglik_observation(Y_slice, N: int, p: float) -> float:
    """Sum over occasions of ``log Binomial(Y_t | N, p)``; ``-inf`` if any ``Y_t > N``."""
    y = np.atleast_1d(np.asarray(Y_slice))
    if np.any(y > N):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (special.gammaln(N + 1.0) - special.gammaln(y + 1.0) - special.gammaln(N - y + 1.0)
                 + special.xlogy(y, p) + special.xlog1py(N - y, -p))
    return float(np.sum(terms))


def logpmf_latent(N: int, lam: float, theta: float | None, spec: ModelSpec) -> float:
    """Log-pmf of the latent abundance under Poisson or hurdle-Poisson."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if N < 0:
        return -np.inf
    if spec.hurdle:
        if theta is None or not 0.0 < theta < 1.0:
            raise ValueError("hurdle models need theta in (0, 1)")
        if N == 0:
            return float(np.log(theta))
        return float(np.log1p(-theta) + N * np.log(lam) - lam - special.gammaln(N + 1.0)
                     - np.log(-np.expm1(-lam)))
    return float(N * np.log(lam) - lam - special.gammaln(N + 1.0))
