"""Capacity scaling on the rotated-cube distribution.

Trains the same data at increasing bond/feature dimension and prints the
KL divergence to the known uniform density (the dataset's entropy is
analytic, so KL = NLL - entropy).  A smaller, faster rendition of the
full experiment: 20k rows and two capacity points instead of five.
"""

import time

from cmps.data import gen_rotated_cube, rescale
from cmps.features import DomainTag, FeatureMap
from cmps.model import random_init
from cmps.trainer import TrainConfig, dmrg_fit, nll

ds = gen_rotated_cube(20_000, seed=1)
ds01, _ = rescale(ds, [(0.0, 1.0)] * 5)

print("rows:", ds01.n_rows, "entropy (original units):", ds.entropy)
for size in (3, 7):
    maps = [FeatureMap.fourier(size, DomainTag.compact(0.0, 1.0))
            for _ in range(5)]
    cfg = TrainConfig(chi_max=size, sweeps=12, seed=0)
    t0 = time.time()
    model, trace = dmrg_fit(random_init(maps, chi=size, seed=0),
                            ds01.values, cfg)
    kl = nll(model, ds01.values) - ds01.log_scale - ds.entropy
    print(f"chi = D = {size:2d}:  KL to truth {kl:6.3f}   "
          f"({time.time() - t0:4.1f}s, {len(trace)} bond updates)")

print("KL falls as capacity grows; the full-scale run continues the "
      "trend through chi = D = 19.")
