"""Simulate a hurdle data set, fit it and compare estimates with the truth.

Run with ``python3 tutorials/01_fit_simulated.py``; takes about a minute.
"""

import numpy as np

from mnmix import ModelSpec, RngStream, SamplerConfig, Scenario, fit, simulate_dataset
from mnmix.metrics import ccc, relative_bias

spec = ModelSpec(hurdle=True)
scen = Scenario(R=10, T=5, S=3, K=1, p_regime="large", lam_regime="small", theta=0.3)
data, truth = simulate_dataset(spec, scen, RngStream(7))
print(f"{data.Y.shape=}  zero fraction {data.zero_fraction:.2f}")

# short chains are enough for a tutorial; the defaults follow the full-length run
cfg = SamplerConfig(n_chains=2, n_iter=3000, n_burn=1000, thin=2, seed=1)
draws, summary = fit(data, spec, cfg)
print("flagged:", summary.flagged or "none")

N_hat = draws.posterior_mean("N")
print(f"CCC(N_hat, N) = {ccc(N_hat.ravel(), truth.N.ravel()):.3f}")
print(f"RB(p)     = {relative_bias(draws.posterior_mean('p'), truth.p):.3f}")
print(f"RB(theta) = {relative_bias(draws.posterior_mean('theta'), truth.theta):.3f}")
print("p true", np.round(truth.p, 2), "est", np.round(draws.posterior_mean("p"), 2))
