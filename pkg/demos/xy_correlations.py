"""Learning a lattice of coupled angles and checking physical observables.

Metropolis MCMC generates 3x3 planar-rotor configurations; a nine-site
periodic-Fourier chain learns the joint density; then we compare
correlation functions between fresh MCMC data and model samples.  These
are the quantities a physicist would actually read off the model, and
they are far more sensitive than eyeballing marginals.
"""

import time

import numpy as np

from cmps.data import gen_xy_model
from cmps.features import FeatureMap
from cmps.model import random_init
from cmps.sampler import sample
from cmps.trainer import TrainConfig, dmrg_fit

t0 = time.time()
ds = gen_xy_model(6000, temperature=0.8, shape=(3, 3), burn_in=300,
                  thinning=10, seed=5, n_chains=60)
print(f"MCMC ground truth: {ds.n_rows} rows ({time.time() - t0:.0f}s)")

maps = [FeatureMap.fourier(7, ds.domains[k]) for k in range(9)]
cfg = TrainConfig(chi_max=8, sweeps=12, seed=0)
t0 = time.time()
model, _ = dmrg_fit(random_init(maps, chi=8, seed=0), ds.values, cfg)
print(f"trained 9-site chain ({time.time() - t0:.0f}s)")

draws = sample(model, seed=1, count=6000)


def corr(rows, i, j):
    return float(np.mean(np.cos(rows[:, i] - rows[:, j])))


pairs = {"horizontal neighbor (0,1)": (0, 1),
         "vertical neighbor   (0,3)": (0, 3),
         "diagonal            (0,4)": (0, 4),
         "opposite corners    (0,8)": (0, 8)}
print(f"\n{'pair':28s} {'MCMC':>8s} {'model':>8s}")
for name, (i, j) in pairs.items():
    print(f"{name:28s} {corr(ds.values, i, j):8.3f} {corr(draws, i, j):8.3f}")

print("\ncorrelations decay with distance; the model should track both "
      "the decay and the absolute scale set by the temperature.")
