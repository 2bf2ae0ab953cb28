"""Shared brute-force oracles: everything here contracts the *dense*
coefficient tensor, bypassing the chain-structured code paths entirely."""
import numpy as np

from cmps.model import to_dense


def dense_phi(m, x):
    """Amplitude at one point from the fully contracted tensor."""
    val = to_dense(m)
    for i, xi in enumerate(np.asarray(x, dtype=np.float64)):
        e = m.embed_site(i, np.asarray([xi]))[0]
        val = np.tensordot(e, val, axes=([0], [0]))
    return complex(val)


def dense_norm_sq(m):
    """<psi, psi> from the dense tensor (features are isometric)."""
    return float(np.linalg.norm(to_dense(m)) ** 2)


def dense_marginal(m, prefix):
    """P(x_1..x_k) by contracting observed embeddings and tracing the rest."""
    val = to_dense(m)
    for i, xi in enumerate(np.asarray(prefix, dtype=np.float64)):
        e = m.embed_site(i, np.asarray([xi]))[0]
        val = np.tensordot(e, val, axes=([0], [0]))
    return float(np.linalg.norm(val) ** 2) / dense_norm_sq(m)
