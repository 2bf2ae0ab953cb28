"""Exact autoregressive sampling and classification for Born-machine chains.

Sampling is sequential inverse-transform.  With the orthogonality center at
site 0, everything to the right of the current site traces to the identity,
so the conditional density of site k given the sampled prefix is the
quadratic form of a small density matrix built from the left environment.
Each row draws one uniform per site and inverts the conditional CDF; no
Markov chain and no rejection step, every row is an independent exact draw
with O(N (chi^2 d + chi d^2)) work.

Rows get their own counter-based RNG streams, so row t of a batch is the
same for a given seed no matter how many rows are requested, and batches
may be produced in parallel without coordination.
"""

from __future__ import annotations

import numpy as np

from .errors import CanonicalFormError, DegenerateStateError, NumericError
from .features import (FeatureMap, _fourier_cdf_coeffs, _fourier_cdf_eval,
                       _get_panels)
from .model import ContinuousMPS

CDF_TOL = 1e-10      # |F(x) - z| stopping tolerance for inversion
MAX_BISECT = 80


def _row_uniforms(seed: int, count: int, n: int) -> np.ndarray:
    """(count, n) uniforms; one Philox stream per row, keyed (seed, row)."""
    key_hi = np.uint64(int(seed) % (1 << 64))
    out = np.empty((count, n), dtype=np.float64)
    for t in range(count):
        bg = np.random.Philox(key=np.array([key_hi, t], dtype=np.uint64))
        out[t] = np.random.Generator(bg).random(n)
    return out


def _bisect(eval_f, z: np.ndarray, lo: np.ndarray, hi: np.ndarray, site: int) -> np.ndarray:
    """Vectorized bisection for monotone CDFs: find x with eval_f(x, rows) = z.

    Rows freeze the moment they converge, so each row's trajectory (and
    final value) is independent of what else is in the batch — sampling a
    row must not depend on the batch size it was requested with.
    """
    lo = lo.astype(np.float64).copy()
    hi = hi.astype(np.float64).copy()
    x = 0.5 * (lo + hi)
    active = np.arange(z.size)
    for _ in range(MAX_BISECT):
        f = eval_f(x[active], active)
        keep = np.abs(f - z[active]) > CDF_TOL
        if not keep.any():
            return x
        right = f < z[active]
        lo[active] = np.where(right, x[active], lo[active])
        hi[active] = np.where(right, hi[active], x[active])
        active = active[keep]
        x[active] = 0.5 * (lo[active] + hi[active])
    raise NumericError(f"CDF inversion did not reach {CDF_TOL:g} at site {site}")


def _invert_site(fm: FeatureMap, sigmas: np.ndarray, z: np.ndarray, site: int) -> np.ndarray:
    """Solve F_t(x_t) = z_t for each row's conditional density matrix.

    ``sigmas`` are Hermitian PSD in the map's (raw) feature space; densities
    are p(x) = sum_{de} zeta_d(x) sigma_de conj(zeta_e(x)) / tr(sigma).
    """
    dom = fm.domain
    if dom.is_discrete:
        diag = np.einsum("tii->ti", sigmas).real
        cum = np.cumsum(diag, axis=1)
        target = z * cum[:, -1]
        idx = np.sum(cum < target[:, None], axis=1)
        return np.clip(idx, 0, fm.dim - 1).astype(np.float64)

    if fm.family == "indicator":
        # piecewise-constant density: the CDF is piecewise linear, invert exactly
        mass = np.einsum("tii->ti", sigmas).real
        cum = np.cumsum(mass, axis=1)
        target = z * cum[:, -1]
        idx = np.clip(np.sum(cum < target[:, None], axis=1), 0, fm.dim - 1)
        rows = np.arange(len(z))
        below = np.where(idx > 0, cum[rows, np.maximum(idx - 1, 0)], 0.0)
        m = mass[rows, idx]
        frac = np.where(m > 0, (target - below) / np.where(m > 0, m, 1.0), 0.0)
        widths = np.diff(fm.edges)
        return fm.edges[idx] + np.clip(frac, 0.0, 1.0) * widths[idx]

    if fm.family == "fourier":
        coeffs = _fourier_cdf_coeffs(fm, sigmas)
        t = _bisect(lambda tt, rows: _fourier_cdf_eval(coeffs[rows], tt), z,
                    np.zeros(len(z)), np.ones(len(z)), site)
        return dom.a + t * dom.length

    panels = _get_panels(fm)
    cums = panels.panel_cumsums(sigmas)           # (T, P+1), unnormalized
    total = cums[:, -1]
    target = z * total
    idx = np.clip(np.sum(cums[:, 1:] < target[:, None], axis=1), 0,
                  panels.edges.size - 2)
    rows = np.arange(len(z))
    base = cums[rows, idx]
    half = panels.half[idx]

    # interpolate each row's density on its panel through the cached Gauss
    # nodes (spectrally accurate), integrate the interpolant exactly, and
    # bisect on the resulting Legendre series -- O(q) per row per iteration
    dens = panels.node_densities(sigmas, idx)                   # (T, q)
    a = dens @ panels.node_to_coeff.T                           # (T, q)
    q = a.shape[1]
    b = np.zeros((len(z), q + 1))
    b[:, 1] = a[:, 0]
    for k in range(1, q):
        c = a[:, k] / (2 * k + 1)
        b[:, k + 1] += c
        b[:, k - 1] -= c
    signs = (-1.0) ** np.arange(1, q + 1)
    b[:, 0] = -(b[:, 1:] * signs).sum(axis=1)                   # G(-1) = 0
    coef = np.ascontiguousarray(b.T)                            # (q+1, T)

    def cdf(u, rr):
        g = np.polynomial.legendre.legval(u, coef[:, rr], tensor=False)
        return (base[rr] + half[rr] * g) / total[rr]

    u = _bisect(cdf, z, np.full(len(z), -1.0), np.ones(len(z)), site)
    return panels.centers[idx] + half * u


def _site_step(m: ContinuousMPS, k: int, envs: np.ndarray):
    """Environment-contracted core and the lifted conditional density matrices."""
    core = m.cores[k]
    l, s, r = core.shape
    g = (envs @ core.reshape(l, s * r)).reshape(-1, s, r)
    sig = np.einsum("tsr,tur->tsu", g, g.conj())
    sig = m.lift_sigma(k, sig)
    traces = np.einsum("tii->t", sig).real
    if np.any(traces <= 0):
        raise DegenerateStateError(
            f"zero-density conditional at site {k}: prefix has measure zero")
    return g, sig


def _advance(g: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Extend environments by embedded values and renormalize each row."""
    envs = np.einsum("ts,tsr->tr", e, g)
    norms = np.linalg.norm(envs, axis=1)
    if np.any(norms == 0):
        raise DegenerateStateError("prefix has measure zero under the model")
    return envs / norms[:, None]


def _require_center_zero(m: ContinuousMPS) -> None:
    if m.center != 0:
        raise CanonicalFormError("sampling needs the orthogonality center at site 0")


def sample(m: ContinuousMPS, seed: int, count: int) -> np.ndarray:
    """Draw ``count`` exact independent rows from the model's density.

    Categorical sites yield integer codes stored as floats; each site
    consumes exactly one uniform per row, so streams stay aligned across
    mixed-domain chains.
    """
    _require_center_zero(m)
    count = int(count)
    z = _row_uniforms(seed, count, m.n_sites)
    out = np.empty((count, m.n_sites), dtype=np.float64)
    envs = np.ones((count, 1), dtype=np.complex128)
    for k in range(m.n_sites):
        g, sig = _site_step(m, k, envs)
        xk = _invert_site(m.feature_maps[k], sig, z[:, k], k)
        out[:, k] = xk
        if k + 1 < m.n_sites:
            envs = _advance(g, m.embed_site(k, xk))
    return out


def _prefix_env(m: ContinuousMPS, fixed: np.ndarray) -> np.ndarray:
    env = np.ones((1, 1), dtype=np.complex128)
    for i in range(fixed.size):
        core = m.cores[i]
        l, s, r = core.shape
        g = (env @ core.reshape(l, s * r)).reshape(-1, s, r)
        env = _advance(g, m.embed_site(i, fixed[i : i + 1]))
    return env


def sample_conditional(m: ContinuousMPS, fixed, seed: int, count: int) -> np.ndarray:
    """Sample the remaining sites given observed values on a leading prefix.

    ``fixed`` holds values for sites 0..j-1; the result has one column per
    unobserved site.  An empty prefix reproduces :func:`sample` exactly
    (same streams, same draws).
    """
    _require_center_zero(m)
    fixed = np.asarray(fixed, dtype=np.float64).ravel()
    j = fixed.size
    if j >= m.n_sites:
        raise ValueError("prefix covers every site; nothing left to sample")
    count = int(count)
    env0 = _prefix_env(m, fixed)
    envs = np.repeat(env0, count, axis=0)
    z = _row_uniforms(seed, count, m.n_sites - j)
    out = np.empty((count, m.n_sites - j), dtype=np.float64)
    for c, k in enumerate(range(j, m.n_sites)):
        g, sig = _site_step(m, k, envs)
        xk = _invert_site(m.feature_maps[k], sig, z[:, c], k)
        out[:, c] = xk
        if k + 1 < m.n_sites:
            envs = _advance(g, m.embed_site(k, xk))
    return out


def classify(m: ContinuousMPS, features, label_site: int | None = None) -> np.ndarray:
    """Posterior P(label | continuous features) for a trailing categorical site.

    ``features`` is a (T, N-1) matrix of values for sites 0..N-2.  Returns a
    (T, K) matrix of class probabilities, each row summing to one.
    """
    _require_center_zero(m)
    n = m.n_sites
    if label_site is None:
        label_site = n - 1
    if label_site != n - 1:
        raise ValueError("the label must live on the last site")
    fm = m.feature_maps[label_site]
    if not fm.domain.is_discrete:
        raise ValueError("the last site is not categorical")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != n - 1:
        raise ValueError(f"expected {n - 1} feature columns, got {features.shape[1]}")
    envs = np.ones((features.shape[0], 1), dtype=np.complex128)
    for k in range(n - 1):
        core = m.cores[k]
        l, s, r = core.shape
        g = (envs @ core.reshape(l, s * r)).reshape(-1, s, r)
        envs = _advance(g, m.embed_site(k, features[:, k]))
    _, sig = _site_step(m, n - 1, envs)
    post = np.einsum("tii->ti", sig).real
    return post / post.sum(axis=1, keepdims=True)
