"""Matrix product states over embedded continuous variables.

A model is a chain of order-3 cores ``A_i[left, site, right]`` contracted
with per-site feature embeddings.  The induced probability density is the
Born rule ``P(x) = |Phi(x)|^2 / Z`` with

    Phi(x) = sum over site indices of  prod_i A_i[.., s_i, ..] * e_i(x_i)[s_i]

and ``Z = <psi, psi>``, which isometric feature maps make equal to the plain
tensor norm of the core chain.  Public functions are non-mutating: they
return fresh models and leave their inputs untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CanonicalFormError
from .features import FeatureMap
from .numerics import qr

__all__ = [
    "ContinuousMPS",
    "ConditionalState",
    "random_init",
    "canonicalize",
    "normalize",
    "evaluate",
    "evaluate_batch",
    "log_density",
    "log_density_batch",
    "marginal",
    "conditional_state",
    "norm_sq",
    "to_dense",
]

_DENSE_CAP = 2 ** 20


class ContinuousMPS:
    """An MPS density model: cores, per-site feature maps, optional layer.

    Parameters
    ----------
    cores : list of ndarray
        Site tensors with index order ``(left, site, right)``; the outer
        boundary dimensions must be 1.
    feature_maps : list of FeatureMap
        One map per site.  ``cores[i].shape[1]`` must equal the map's
        dimension unless a compression layer shrinks it.
    layer : optional
        Per-site isometries ``U_i`` of shape ``(D_i, d_i)`` applied as
        ``U_i^+ zeta_i(x)`` before contraction (see ``cmps.compression``).
    center : int or None
        Site index of the orthogonality center when the chain is canonical.
    """

    def __init__(self, cores, feature_maps, layer=None, center=None, field="complex"):
        if len(cores) != len(feature_maps):
            raise ValueError("one feature map per core required")
        if field not in ("complex", "real"):
            raise ValueError("field must be 'complex' or 'real'")
        dtype = np.complex128 if field == "complex" else np.float64
        self.cores = [np.asarray(c, dtype=dtype) for c in cores]
        self.feature_maps = list(feature_maps)
        self.layer = layer
        self.center = center
        self.field = field
        self._norm_sq = None
        self._validate()

    # -- structure ---------------------------------------------------------
    def _validate(self):
        n = len(self.cores)
        if n == 0:
            raise ValueError("empty chain")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("boundary bond dimensions must be 1")
        for i, core in enumerate(self.cores):
            if core.ndim != 3:
                raise ValueError(f"core {i} is not order 3")
            if i and core.shape[0] != self.cores[i - 1].shape[2]:
                raise ValueError(f"bond mismatch between cores {i - 1} and {i}")
            if core.shape[1] != self.site_dim(i):
                raise ValueError(
                    f"core {i} site dimension {core.shape[1]} != effective "
                    f"feature dimension {self.site_dim(i)}"
                )

    @property
    def n_sites(self) -> int:
        return len(self.cores)

    @property
    def bond_dims(self) -> list[int]:
        return [c.shape[2] for c in self.cores[:-1]]

    def site_dim(self, i: int) -> int:
        u = self._layer_matrix(i)
        return self.feature_maps[i].dim if u is None else u.shape[1]

    def _layer_matrix(self, i: int):
        if self.layer is None:
            return None
        return self.layer.matrix(i)

    # -- embeddings --------------------------------------------------------
    def embed_site(self, i: int, xs: np.ndarray) -> np.ndarray:
        """Effective site embedding (compressed when a layer is present)."""
        e = self.feature_maps[i].embed_batch(np.asarray(xs, dtype=np.float64))
        u = self._layer_matrix(i)
        return e if u is None else e @ u.conj()

    def lift_sigma(self, i: int, sigma_site: np.ndarray) -> np.ndarray:
        """Map a site-space conditional density matrix back to feature space.

        The density is the row-unconjugated form ``zeta sigma zeta*`` and
        the effective embedding is ``zeta^T conj(U)``, so the transported
        matrix is ``conj(U) sigma U^T`` (Hermiticity is preserved; the two
        orderings agree only for real matrices).
        """
        u = self._layer_matrix(i)
        if u is None:
            return sigma_site
        return np.einsum("ac,...cd,bd->...ab", u.conj(), sigma_site, u)

    def copy(self) -> "ContinuousMPS":
        m = ContinuousMPS([c.copy() for c in self.cores], self.feature_maps,
                          layer=self.layer, center=self.center, field=self.field)
        m._norm_sq = self._norm_sq
        return m


@dataclass
class ConditionalState:
    """Conditional density matrix for one site given an observed prefix.

    The density of the next coordinate is
    ``p(x) = zeta(x)^+  sigma  zeta(x) / trace`` in *feature* space (a
    compression layer is already folded in by ``lift_sigma``).
    """

    site: int
    sigma: np.ndarray
    trace: float


def random_init(feature_maps, chi, seed=0, field="complex", layer=None,
                site_dims=None) -> ContinuousMPS:
    """IID-Gaussian cores with entry variance ``1/(d_i * chi_i_right)``.

    That variance makes ``E[<psi, psi>] = 1`` for every architecture: the
    norm expectation telescopes into the product of ``t_i * d_i * chi_i``
    over sites (right boundary counted as bond dimension 1).
    """
    n = len(feature_maps)
    if site_dims is None:
        if layer is not None:
            site_dims = [layer.matrix(i).shape[1] for i in range(n)]
        else:
            site_dims = [fm.dim for fm in feature_maps]
    if np.isscalar(chi):
        chi = [int(chi)] * (n - 1)
    chi = list(chi) + [1]
    rng = np.random.Generator(np.random.Philox(int(seed)))
    cores = []
    left = 1
    for i in range(n):
        right = 1 if i == n - 1 else int(chi[i])
        t = 1.0 / (site_dims[i] * right)
        shape = (left, site_dims[i], right)
        if field == "complex":
            core = rng.normal(scale=math.sqrt(t / 2.0), size=shape) \
                + 1j * rng.normal(scale=math.sqrt(t / 2.0), size=shape)
        else:
            core = rng.normal(scale=math.sqrt(t), size=shape)
        cores.append(core)
        left = right
    return ContinuousMPS(cores, feature_maps, layer=layer, field=field)


def canonicalize(m: ContinuousMPS, center: int = 0) -> ContinuousMPS:
    """Gauge the chain so cores left of ``center`` are left-isometries and
    cores right of it are right-isometries.  The function Phi is unchanged.
    """
    n = m.n_sites
    if not 0 <= center < n:
        raise ValueError("center out of range")
    cores = [c.copy() for c in m.cores]
    for i in range(center):
        l, d, r = cores[i].shape
        q, rr = qr(cores[i].reshape(l * d, r))
        cores[i] = q.reshape(l, d, q.shape[1])
        cores[i + 1] = np.einsum("ab,bsr->asr", rr, cores[i + 1])
    for i in range(n - 1, center, -1):
        l, d, r = cores[i].shape
        q, rr = qr(cores[i].reshape(l, d * r).conj().T)
        cores[i] = q.conj().T.reshape(q.shape[1], d, r)
        cores[i - 1] = np.einsum("lsa,ab->lsb", cores[i - 1], rr.conj().T)
    out = ContinuousMPS(cores, m.feature_maps, layer=m.layer, center=center,
                        field=m.field)
    out._norm_sq = float(np.linalg.norm(cores[center]) ** 2)
    return out


def normalize(m: ContinuousMPS) -> ContinuousMPS:
    """Scale the model so ``<psi, psi> = 1`` (canonicalizing if needed)."""
    out = m if m.center is not None else canonicalize(m, 0)
    out = out.copy()
    nrm = math.sqrt(norm_sq(out))
    if nrm == 0.0:
        raise ValueError("cannot normalize the zero state")
    out.cores[out.center] = out.cores[out.center] / nrm
    out._norm_sq = 1.0
    return out


def norm_sq(m: ContinuousMPS) -> float:
    """Exact ``<psi, psi>`` by full contraction (cached per instance)."""
    if m._norm_sq is not None:
        return m._norm_sq
    env = np.ones((1, 1), dtype=m.cores[0].dtype)
    for core in m.cores:
        half = np.einsum("lm,lsr->msr", env, core)
        env = np.einsum("msr,msq->rq", half, core.conj())
    val = float(env.real[0, 0])
    m._norm_sq = val
    return val


def evaluate(m: ContinuousMPS, x) -> complex:
    """Amplitude Phi(x) for one point ``x`` (length ``n_sites``)."""
    return complex(evaluate_batch(m, np.asarray(x, dtype=np.float64)[np.newaxis])[0])


def evaluate_batch(m: ContinuousMPS, xs: np.ndarray, chunk: int = 16384) -> np.ndarray:
    """Amplitudes for a batch of points, shape ``(T, n_sites) -> (T,)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != m.n_sites:
        raise ValueError(f"expected (T, {m.n_sites}) array, got {xs.shape}")
    out = np.empty(xs.shape[0], dtype=np.complex128)
    for lo in range(0, xs.shape[0], chunk):
        hi = min(lo + chunk, xs.shape[0])
        env = np.ones((hi - lo, 1), dtype=np.complex128)
        for i, core in enumerate(m.cores):
            e = m.embed_site(i, xs[lo:hi, i])
            l, d, r = core.shape
            # env' = einsum('tl,ts,lsr->tr') via one GEMM on the fused (l, s) axis
            a = (env[:, :, np.newaxis] * e[:, np.newaxis, :]).reshape(hi - lo, l * d)
            env = a @ core.reshape(l * d, r)
        out[lo:hi] = env[:, 0]
    return out


def log_density(m: ContinuousMPS, x) -> float:
    """``log P(x)``; returns ``-inf`` where the amplitude vanishes."""
    return float(log_density_batch(m, np.asarray(x, dtype=np.float64)[np.newaxis])[0])


def log_density_batch(m: ContinuousMPS, xs: np.ndarray) -> np.ndarray:
    phi = evaluate_batch(m, xs)
    z = norm_sq(m)
    out = np.full(phi.shape, -np.inf)
    nz = phi != 0
    out[nz] = 2.0 * np.log(np.abs(phi[nz])) - np.log(z)
    return out


def marginal(m: ContinuousMPS, prefix) -> float:
    """Joint marginal density ``P(x_1 .. x_k)`` of the first ``k`` sites.

    Requires a canonical model with ``center <= k`` (0-based), so the
    integral over the remaining sites collapses through the isometries.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    k = prefix.size
    n = m.n_sites
    if not 1 <= k <= n:
        raise ValueError("prefix length out of range")
    if m.center is None or m.center > k:
        raise CanonicalFormError(f"need canonical form with center <= {k}")
    env = np.ones(1, dtype=np.complex128)
    for i in range(k):
        e = m.embed_site(i, prefix[i : i + 1])[0]
        env = np.einsum("l,lsr,s->r", env, m.cores[i], e)
    if m.center == k and k < n:
        core = m.cores[k]
        rho = np.einsum("lsr,msr->lm", core, core.conj())
        val = np.einsum("l,lm,m->", env.conj(), rho, env).real
    else:
        val = float(np.linalg.norm(env) ** 2)
    return float(val) / norm_sq(m)


def conditional_state(m: ContinuousMPS, observed=()) -> ConditionalState:
    """Density matrix of site ``k`` given the first ``k`` observed values.

    Requires the orthogonality center at site 0 so the traced right part
    is an exact identity.  The returned ``sigma`` lives in feature space;
    the (unnormalized) conditional density is the quadratic form
    ``sum_{de} zeta_d(x) sigma_de conj(zeta_e(x))``, i.e. the row index
    pairs with the unconjugated embedding exactly as in the amplitude.
    """
    if m.center != 0:
        raise CanonicalFormError("conditional_state needs center at site 0")
    observed = np.asarray(observed, dtype=np.float64)
    k = observed.size
    if k >= m.n_sites:
        raise ValueError("all sites observed; nothing to condition")
    env = np.ones(1, dtype=np.complex128)
    for i in range(k):
        e = m.embed_site(i, observed[i : i + 1])[0]
        env = np.einsum("l,lsr,s->r", env, m.cores[i], e)
    core = m.cores[k]
    g = np.einsum("l,lsr->sr", env, core)
    sigma_site = g @ g.conj().T  # reduced density matrix of the site
    sigma = m.lift_sigma(k, sigma_site)
    return ConditionalState(site=k, sigma=sigma, trace=float(np.trace(sigma).real))


def to_dense(m: ContinuousMPS) -> np.ndarray:
    """Contract the chain into the full joint coefficient tensor.

    Refuses when the product of site dimensions exceeds ``2**20``.
    """
    total = 1
    for i in range(m.n_sites):
        total *= m.site_dim(i)
        if total > _DENSE_CAP:
            raise ValueError(f"dense tensor would exceed {_DENSE_CAP} entries")
    psi = np.ones((1,), dtype=np.complex128)
    shape = []
    for core in m.cores:
        psi = np.tensordot(psi, core, axes=([psi.ndim - 1], [0]))
        shape.append(core.shape[1])
    return psi.reshape(shape)
