"""Continuous-valued matrix product state Born machines.

Chains of complex tensors contracted with per-site feature embeddings
define a wavefunction whose squared magnitude is a normalized density
over continuous and categorical variables.  See the submodules:

- ``features``     orthonormal bases on tagged domains
- ``model``        the chain, canonical forms, marginals, conditionals
- ``trainer``      two-site DMRG likelihood training
- ``sampler``      exact autoregressive sampling and classification
- ``compression``  learned feature-space isometries
- ``data``         dataset generators and CSV round-trips
- ``evaluation``   KL estimators and metric reports
- ``storage``      binary model files
- ``cli``          the ``cmps`` command line tool

Submodules are imported lazily so that process-level knobs (BLAS thread
caps) can be applied before the numeric stack loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("cli", "compression", "data", "errors", "evaluation",
               "features", "model", "numerics", "sampler", "storage",
               "trainer")


def __getattr__(name):
    if name in _SUBMODULES:
        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
