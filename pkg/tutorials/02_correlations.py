"""Analytic abundance correlations next to brute-force Monte Carlo.

Latent log-rates are correlated through Sigma; Poisson noise attenuates the
correlation that reaches the counts, and the hurdle attenuates it further.
"""

import numpy as np

from mnmix.correlations import corr_ar, corr_from_sigma, corr_hurdle, corr_mnm
from mnmix.distributions import rhurdle_poisson

mu = np.array([1.0, 1.0])
Sigma = np.array([[0.5, 0.2], [0.2, 0.5]])
g = np.random.default_rng(0)
lam = np.exp(g.multivariate_normal(mu, Sigma, size=10**6))

print(f"latent      {corr_from_sigma(Sigma)[0, 1]:.4f}")
print(f"MNM         {corr_mnm(mu, Sigma)[0, 1]:.4f}  MC {np.corrcoef(g.poisson(lam).T)[0, 1]:.4f}")
for theta in (0.2, 0.7):
    mc = np.corrcoef(rhurdle_poisson(lam, theta, g).T)[0, 1]
    print(f"hurdle {theta:.1f}  {corr_hurdle(mu, Sigma, theta)[0, 1]:.4f}  MC {mc:.4f}")

# the AR substitution changes magnitudes from year to year but never signs
phi = np.array([0.3, 0.2])
for k, prev in enumerate([None, [4, 9], [20, 2]]):
    r = corr_ar(mu, Sigma, N_prev=prev, k=k, mu_phi=phi, Sigma_phi=[0.02, 0.02])
    print(f"AR year {k}   {r[0, 1]:.4f}")
