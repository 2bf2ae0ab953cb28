"""Why a trained feature-compression layer beats just using fewer features.

The synthetic table mixes near-discrete columns (a three-level and a
two-level quantizer) with smooth ones.  Capturing a quantized marginal
needs many polynomial features -- but those features are only needed in
a 3-dimensional subspace per site.  A D=16 -> d=3 isometry learned by
alternating Procrustes solves keeps the rich basis at the cost of the
small one.
"""

import time

from cmps.compression import CompressionLayer, fit_compressed
from cmps.data import gen_compressible
from cmps.features import DomainTag, FeatureMap
from cmps.model import random_init
from cmps.trainer import TrainConfig, dmrg_fit, nll

ds = gen_compressible(5000, seed=3)
cfg = TrainConfig(chi_max=4, sweeps=8, seed=0)


def maps_of(dim):
    return [FeatureMap.legendre(dim, DomainTag.compact(d.a, d.b))
            for d in ds.domains]


t0 = time.time()
full, _ = dmrg_fit(random_init(maps_of(16), chi=4, seed=0), ds.values, cfg)
print(f"D=16, no layer:      nll {nll(full, ds.values):+.3f}  "
      f"({time.time() - t0:.0f}s)")

t0 = time.time()
small, _ = dmrg_fit(random_init(maps_of(3), chi=4, seed=0), ds.values, cfg)
print(f"D=3,  no layer:      nll {nll(small, ds.values):+.3f}  "
      f"({time.time() - t0:.0f}s)")

t0 = time.time()
layer = CompressionLayer.truncation(16, 3, n_sites=4, shared=False)
comp, _ = fit_compressed(random_init(maps_of(16), chi=4, seed=0, layer=layer),
                         ds.values, cfg, layer_every=1)
print(f"D=16 -> d=3 layer:   nll {nll(comp, ds.values):+.3f}  "
      f"({time.time() - t0:.0f}s)")

print("\nthe compressed model runs at the d=3 contraction cost but keeps "
      "nearly all of the D=16 likelihood.")
