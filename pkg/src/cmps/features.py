"""Feature maps embedding scalar values into C^D, and their calculus.

A feature map ``zeta: domain -> C^D`` turns a continuous (or categorical)
variable into a D-component amplitude vector.  All built-in continuous
families are *isometric*: ``integral  f_i(x)* f_j(x) dx = delta_ij`` over
their domain, which is what makes normalization and marginalization of the
tensor-network densities exact.  Custom function families can be brought to
this form with :func:`isometrize`, which whitens the overlap matrix through
its inverse square root.

Families
--------
fourier    ``exp(2*pi*i*k*t)/sqrt(L)`` on an interval of length L, k = 0..D-1
legendre   orthonormal Legendre polynomials on ``[a, b]``
laguerre   ``L_k(x) * exp(-x/2)`` on the half line
hermite    Hermite functions ``H_k(x) exp(-x^2/2)/sqrt(2^k k! sqrt(pi))``
indicator  bin indicators scaled by ``1/sqrt(width)``; one-hot for
           categorical domains
custom     caller-supplied callables (isometrize before use)

The optional ``rescale`` flag of the laguerre/hermite families evaluates
``D**0.25 * f_k(sqrt(D) * x)``, concentrating the fixed-D basis onto the
region where its resolution actually grows with D; the amplitude factor
keeps the family isometric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateStateError, DomainError
from .numerics import QuadratureRule, gauss_hermite, gauss_laguerre, gauss_legendre, hermitian_inv_sqrt

__all__ = [
    "DomainTag",
    "FeatureMap",
    "embed",
    "overlap_matrix",
    "isometrize",
    "prior_density",
    "cumulative",
]

FAMILIES = ("fourier", "legendre", "laguerre", "hermite", "indicator", "custom")


@dataclass(frozen=True)
class DomainTag:
    """Where a variable lives: an interval, a line, or a finite code set."""

    kind: str
    a: float = math.nan
    b: float = math.nan
    cardinality: int = 0

    @staticmethod
    def compact(a: float, b: float) -> "DomainTag":
        if not (b > a):
            raise ValueError(f"need a < b, got [{a}, {b}]")
        return DomainTag("compact", float(a), float(b))

    @staticmethod
    def periodic(a: float, b: float) -> "DomainTag":
        if not (b > a):
            raise ValueError(f"need a < b, got [{a}, {b}]")
        return DomainTag("periodic", float(a), float(b))

    @staticmethod
    def half_line() -> "DomainTag":
        return DomainTag("half_line", 0.0, math.inf)

    @staticmethod
    def real_line() -> "DomainTag":
        return DomainTag("real_line", -math.inf, math.inf)

    @staticmethod
    def categorical(cardinality: int) -> "DomainTag":
        if cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        return DomainTag("categorical", 0.0, float(cardinality - 1), int(cardinality))

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def is_discrete(self) -> bool:
        return self.kind == "categorical"

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if self.kind in ("compact",):
            tol = 1e-9 * max(self.length, 1.0)
            return np.isfinite(x) & (x >= self.a - tol) & (x <= self.b + tol)
        if self.kind == "periodic":
            return np.isfinite(x)
        if self.kind == "half_line":
            return np.isfinite(x) & (x >= 0.0)
        if self.kind == "real_line":
            return np.isfinite(x)
        # categorical: integer codes in range
        return np.isfinite(x) & (x == np.floor(x)) & (x >= 0) & (x < self.cardinality)


# ---------------------------------------------------------------------------
# raw family evaluations (vectorized over x)

def _fourier_raw(x: np.ndarray, dim: int, a: float, length: float) -> np.ndarray:
    t = (np.asarray(x, dtype=np.float64) - a) / length
    k = np.arange(dim)
    return np.exp(2j * np.pi * np.multiply.outer(t, k)) / math.sqrt(length)


def _legendre_raw(x: np.ndarray, dim: int, a: float, length: float) -> np.ndarray:
    # orthonormal Legendre on [a, a + length], three-term recurrence
    t = 2.0 * (np.asarray(x, dtype=np.float64) - a) / length - 1.0
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    p_prev = np.ones_like(t)
    out[..., 0] = p_prev
    if dim > 1:
        p = t.copy()
        out[..., 1] = p
        for k in range(1, dim - 1):
            p_next = ((2 * k + 1) * t * p - k * p_prev) / (k + 1)
            out[..., k + 1] = p_next
            p_prev, p = p, p_next
    norm = np.sqrt((2.0 * np.arange(dim) + 1.0) / length)
    return (out * norm).astype(np.complex128)


def _laguerre_raw(x: np.ndarray, dim: int, scale: float, amp: float) -> np.ndarray:
    # amp * L_k(scale*x) * exp(-scale*x/2); orthonormal when amp = sqrt(scale)
    u = scale * np.asarray(x, dtype=np.float64)
    out = np.empty(u.shape + (dim,), dtype=np.float64)
    p_prev = np.ones_like(u)
    out[..., 0] = p_prev
    if dim > 1:
        p = 1.0 - u
        out[..., 1] = p
        for k in range(1, dim - 1):
            p_next = ((2 * k + 1 - u) * p - k * p_prev) / (k + 1)
            out[..., k + 1] = p_next
            p_prev, p = p, p_next
    return (out * (amp * np.exp(-0.5 * u))[..., np.newaxis]).astype(np.complex128)


def _hermite_raw(x: np.ndarray, dim: int, scale: float, amp: float) -> np.ndarray:
    # amp * h_k(scale*x) with h_k the orthonormal Hermite functions
    u = scale * np.asarray(x, dtype=np.float64)
    out = np.empty(u.shape + (dim,), dtype=np.float64)
    h_prev = np.pi ** -0.25 * np.exp(-0.5 * u * u)
    out[..., 0] = h_prev
    if dim > 1:
        h = math.sqrt(2.0) * u * h_prev
        out[..., 1] = h
        for k in range(1, dim - 1):
            h_next = math.sqrt(2.0 / (k + 1)) * u * h - math.sqrt(k / (k + 1.0)) * h_prev
            out[..., k + 1] = h_next
            h_prev, h = h, h_next
    return (out * amp).astype(np.complex128)


def _indicator_raw(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dim = edges.size - 1
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, dim - 1)
    widths = np.diff(edges)
    out = np.zeros(x.shape + (dim,), dtype=np.complex128)
    np.put_along_axis(out, idx[..., np.newaxis], (widths[idx] ** -0.5)[..., np.newaxis], axis=-1)
    return out


def _onehot_raw(x: np.ndarray, cardinality: int) -> np.ndarray:
    codes = np.asarray(x)
    out = np.zeros(codes.shape + (cardinality,), dtype=np.complex128)
    np.put_along_axis(out, codes.astype(np.intp)[..., np.newaxis], 1.0, axis=-1)
    return out


@dataclass(frozen=True)
class FeatureMap:
    """A family of D feature functions on a common domain.

    Instances are immutable; :func:`isometrize` returns a corrected copy
    whose functions are the originals mixed by the whitening matrix ``x_matrix``.
    """

    family: str
    dim: int
    domain: DomainTag
    rescale: bool = False
    edges: np.ndarray | None = None
    funcs: Sequence[Callable[[np.ndarray], np.ndarray]] | None = None
    x_matrix: np.ndarray | None = None
    isometric: bool = True
    quad_n: int = 0

    # -- constructors ------------------------------------------------------
    @staticmethod
    def fourier(dim: int, domain: DomainTag | None = None) -> "FeatureMap":
        domain = domain or DomainTag.compact(0.0, 1.0)
        if domain.kind not in ("compact", "periodic"):
            raise ValueError("fourier needs a finite interval")
        return FeatureMap("fourier", int(dim), domain)

    @staticmethod
    def legendre(dim: int, domain: DomainTag | None = None) -> "FeatureMap":
        domain = domain or DomainTag.compact(-1.0, 1.0)
        if domain.kind != "compact":
            raise ValueError("legendre needs a compact interval")
        return FeatureMap("legendre", int(dim), domain)

    @staticmethod
    def laguerre(dim: int, rescale: bool = False) -> "FeatureMap":
        return FeatureMap("laguerre", int(dim), DomainTag.half_line(), rescale=rescale)

    @staticmethod
    def hermite(dim: int, rescale: bool = False) -> "FeatureMap":
        return FeatureMap("hermite", int(dim), DomainTag.real_line(), rescale=rescale)

    @staticmethod
    def indicator(edges: Sequence[float]) -> "FeatureMap":
        edges = np.asarray(edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with >= 2 entries")
        dom = DomainTag.compact(float(edges[0]), float(edges[-1]))
        return FeatureMap("indicator", edges.size - 1, dom, edges=edges)

    @staticmethod
    def categorical(cardinality: int) -> "FeatureMap":
        return FeatureMap("indicator", int(cardinality), DomainTag.categorical(cardinality))

    @staticmethod
    def custom(funcs: Sequence[Callable], domain: DomainTag, quad_n: int = 0) -> "FeatureMap":
        if domain.is_discrete:
            raise ValueError("custom maps are for continuous domains")
        return FeatureMap("custom", len(funcs), domain, funcs=tuple(funcs),
                          isometric=False, quad_n=int(quad_n))

    # -- evaluation --------------------------------------------------------
    @property
    def _scale(self) -> float:
        return math.sqrt(self.dim) if self.rescale else 1.0

    def raw_values(self, x: np.ndarray) -> np.ndarray:
        """Family functions before isometrization, shape ``x.shape + (D,)``."""
        dom = self.domain
        if self.family == "fourier":
            return _fourier_raw(x, self.dim, dom.a, dom.length)
        if self.family == "legendre":
            return _legendre_raw(x, self.dim, dom.a, dom.length)
        if self.family == "laguerre":
            s = self._scale
            return _laguerre_raw(x, self.dim, s, math.sqrt(s))
        if self.family == "hermite":
            s = self._scale
            return _hermite_raw(x, self.dim, s, math.sqrt(s))
        if self.family == "indicator":
            if dom.is_discrete:
                return _onehot_raw(x, dom.cardinality)
            return _indicator_raw(x, self.edges)
        vals = np.stack([np.asarray(f(np.asarray(x, dtype=np.float64)), dtype=np.complex128)
                         for f in self.funcs], axis=-1)
        return vals

    def values(self, x: np.ndarray) -> np.ndarray:
        """Feature functions with any isometrization correction applied."""
        raw = self.raw_values(x)
        if self.x_matrix is None:
            return raw
        return raw @ self.x_matrix

    def embed_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        ok = self.domain.contains(x)
        if not np.all(ok):
            bad = x[~np.asarray(ok, dtype=bool)].ravel()
            raise DomainError(f"value {bad[0]!r} outside domain {self.domain}")
        if self.domain.kind == "periodic":
            x = self.domain.a + np.mod(x - self.domain.a, self.domain.length)
        elif self.domain.kind == "compact":
            x = np.clip(x, self.domain.a, self.domain.b)
        return self.values(x)

    # -- quadrature --------------------------------------------------------
    def quadrature(self) -> QuadratureRule:
        """A rule integrating plain-``dx`` products of this map's functions.

        Interval families get 4*D Gauss-Legendre nodes (4 per bin for
        indicators).  On unbounded domains the Gauss-Laguerre/-Hermite
        weights are converted to total weights ``w * exp(+x)`` /
        ``w * exp(+x^2)``; the growth cancels against the families' built-in
        decay, so products of feature functions still integrate exactly.
        """
        dom = self.domain
        n = self.quad_n or 4 * self.dim
        if dom.kind in ("compact", "periodic"):
            if self.family == "indicator":
                rules = [gauss_legendre(4, self.edges[i], self.edges[i + 1])
                         for i in range(self.dim)]
                return QuadratureRule(np.concatenate([r.nodes for r in rules]),
                                      np.concatenate([r.weights for r in rules]))
            return gauss_legendre(n, dom.a, dom.b)
        if dom.kind == "half_line":
            base = gauss_laguerre(n)
            s = self._scale
            return QuadratureRule(base.nodes / s, base.weights * np.exp(base.nodes) / s)
        if dom.kind == "real_line":
            base = gauss_hermite(n)
            s = self._scale
            return QuadratureRule(base.nodes / s, base.weights * np.exp(base.nodes ** 2) / s)
        return QuadratureRule(np.arange(dom.cardinality, dtype=np.float64),
                              np.ones(dom.cardinality))


def embed(fm: FeatureMap, x) -> np.ndarray:
    """Feature vector ``zeta(x)`` in C^D for a single value ``x``."""
    return fm.embed_batch(np.asarray(x, dtype=np.float64).reshape(()))


def overlap_matrix(fm: FeatureMap, rule: QuadratureRule | None = None) -> np.ndarray:
    """Gram matrix ``M_ij = integral f_i(x)* f_j(x) dx`` of the map's functions."""
    rule = rule or fm.quadrature()
    vals = fm.values(rule.nodes)
    m = vals.conj().T @ (rule.weights[:, np.newaxis] * vals)
    return 0.5 * (m + m.conj().T)


def isometrize(fm: FeatureMap, rank_tol: float = 1e-10) -> FeatureMap:
    """Whiten the family so its overlap matrix becomes the identity.

    Returns a copy with ``x_matrix`` composed with ``M**-0.5`` where ``M``
    is the current overlap; the new functions are
    ``g_k = sum_j f_j * X_jk``.  Raises
    :class:`~cmps.errors.RankDeficiencyError` when the family is numerically
    linearly dependent.
    """
    m = overlap_matrix(fm)
    x_new = hermitian_inv_sqrt(m, rank_tol=rank_tol)
    composed = x_new if fm.x_matrix is None else fm.x_matrix @ x_new
    return replace(fm, x_matrix=composed, isometric=True)


def prior_density(fm: FeatureMap, x) -> np.ndarray | float:
    """Single-site density of a randomly initialized model:
    ``P(x) = ||zeta(x)||^2 / D``.

    Requires an isometric map, so the density integrates to one.
    """
    if not fm.isometric:
        raise ValueError("prior density needs an isometric map; call isometrize() first")
    vals = fm.embed_batch(np.asarray(x, dtype=np.float64))
    return (np.abs(vals) ** 2).sum(axis=-1) / fm.dim


# ---------------------------------------------------------------------------
# cumulative distribution machinery

_PANEL_Q = 12  # Gauss nodes per panel for piecewise CDF integration


class _CdfPanels:
    """Piecewise-Gauss representation of ``x -> integral_lo^x zeta sigma zeta*``.

    Panel edges follow the map's quadrature nodes, so resolution is spent
    where the family itself has structure.  Feature values at all panel
    nodes are cached on the map once; per-sigma work is then a couple of
    einsums.
    """

    def __init__(self, fm: FeatureMap):
        rule = fm.quadrature()
        nodes = np.sort(rule.nodes)
        dom = fm.domain
        if dom.kind in ("compact", "periodic"):
            lo, hi = dom.a, dom.b
        elif dom.kind == "half_line":
            lo, hi = 0.0, nodes[-1] * 1.1 + 10.0 / fm._scale
        else:
            pad = 0.15 * (nodes[-1] - nodes[0]) + 2.0 / fm._scale
            lo, hi = nodes[0] - pad, nodes[-1] + pad
        inner = nodes[(nodes > lo) & (nodes < hi)]
        mids = 0.5 * (inner[1:] + inner[:-1])
        self.edges = np.concatenate([[lo], mids, [hi]])
        base_x, base_w = np.polynomial.legendre.leggauss(_PANEL_Q)
        half = 0.5 * np.diff(self.edges)
        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        self.nodes = centers[:, None] + half[:, None] * base_x[None, :]   # (P, q)
        self.weights = half[:, None] * base_w[None, :]                    # (P, q)
        self.feat = fm.values(self.nodes)                                  # (P, q, D)
        self.half = half
        self.centers = centers
        # real families avoid complex arithmetic: for Hermitian sigma the
        # imaginary part drops out of the quadratic form
        self.feat_real = self.feat.real if np.all(self.feat.imag == 0) else None
        # node-values -> Legendre-series coefficients on [-1, 1]; exact for
        # the degree-(q-1) interpolant through the Gauss nodes
        vander = np.polynomial.legendre.legvander(base_x, _PANEL_Q - 1)    # (q, q)
        scale = (2.0 * np.arange(_PANEL_Q) + 1.0) / 2.0
        self.node_to_coeff = scale[:, None] * (vander.T * base_w[None, :])
        self._gauss = (base_x, base_w)
        self._fm = fm

    def _quad_form(self, feat: np.ndarray, feat_r, sigmas: np.ndarray,
                   spec: str) -> np.ndarray:
        if feat_r is not None:
            return np.einsum(spec, feat_r, sigmas.real, feat_r, optimize=True)
        return np.einsum(spec, feat, sigmas, feat.conj(), optimize=True).real

    def panel_cumsums(self, sigmas: np.ndarray) -> np.ndarray:
        """Cumulative integrals at panel edges, shape (T, P+1)."""
        dens = self._quad_form(self.feat, self.feat_real, sigmas, "pqd,tde,pqe->tpq")
        per_panel = (dens * self.weights[None]).sum(axis=-1)
        zero = np.zeros((sigmas.shape[0], 1))
        return np.concatenate([zero, np.cumsum(per_panel, axis=1)], axis=1)

    def node_densities(self, sigmas: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Density values at the Gauss nodes of per-row panels, shape (T, q)."""
        feat = self.feat[idx]
        fr = self.feat_real[idx] if self.feat_real is not None else None
        return self._quad_form(feat, fr, sigmas, "tqd,tde,tqe->tq")

    def partial(self, sigmas: np.ndarray, lo: np.ndarray, x: np.ndarray) -> np.ndarray:
        """``integral_lo^x`` of the quadratic form, rowwise (lo, x aligned with sigmas)."""
        base_x, base_w = self._gauss
        half = 0.5 * (x - lo)
        pts = (lo + half)[:, None] + half[:, None] * base_x[None, :]      # (T, q)
        feat = self._fm.values(pts)                                        # (T, q, D)
        fr = feat.real if self.feat_real is not None else None
        dens = self._quad_form(feat, fr, sigmas, "tqd,tde,tqe->tq")
        return (dens * (half[:, None] * base_w[None, :])).sum(axis=-1)


def _fourier_cdf_coeffs(fm: FeatureMap, sigmas: np.ndarray) -> np.ndarray:
    """Diagonal sums c_m = sum_i sigma[i + m, i] for m = 0..D-1, shape (T, D).

    These are the Fourier coefficients of the density: the quadratic form
    sum_{de} zeta_d sigma_de conj(zeta_e) collects exp(2*pi*i*m*t/L) with
    weight c_m / L, and c_{-m} = conj(c_m) because sigma is Hermitian.
    """
    t, d, _ = sigmas.shape
    coeffs = np.empty((t, d), dtype=np.complex128)
    for m in range(d):
        coeffs[:, m] = sigmas[:, np.arange(m, d), np.arange(d - m)].sum(axis=1)
    return coeffs


def _fourier_cdf_eval(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Normalized CDF at relative coordinates t in [0, 1], rowwise."""
    d = coeffs.shape[1]
    total = coeffs[:, 0].real
    acc = total * t
    for m in range(1, d):
        acc = acc + 2.0 * (coeffs[:, m] * (np.exp(2j * np.pi * m * t) - 1.0)
                           / (2j * np.pi * m)).real
    return acc / total


def cdf_batch(fm: FeatureMap, sigmas: np.ndarray, x: np.ndarray) -> np.ndarray:
    """CDF values of the densities ``zeta sigma_t zeta* / tr(sigma_t)`` at ``x_t``.

    The quadratic form pairs the unconjugated embedding with ``sigma``'s row
    index: p(t) = sum_{de} zeta_d(t) sigma_de conj(zeta_e(t)).  That matches
    density matrices built as G G^dagger from amplitude-side contractions in
    which embeddings enter unconjugated.
    """
    sigmas = np.asarray(sigmas, dtype=np.complex128)
    x = np.asarray(x, dtype=np.float64)
    traces = np.einsum("tii->t", sigmas).real
    if np.any(traces <= 0):
        raise DegenerateStateError("conditional state has non-positive trace")
    dom = fm.domain
    if fm.family == "fourier":
        coeffs = _fourier_cdf_coeffs(fm, sigmas)
        t = (x - dom.a) / dom.length
        return np.clip(_fourier_cdf_eval(coeffs, np.clip(t, 0.0, 1.0)), 0.0, 1.0)
    if fm.family == "indicator" and not dom.is_discrete:
        diag = np.einsum("tii->ti", sigmas).real
        widths = np.diff(fm.edges)
        probs = diag / traces[:, None]          # per-bin probability (1/w amplitude^2 * w)
        cum = np.concatenate([np.zeros((len(sigmas), 1)), np.cumsum(probs, axis=1)], axis=1)
        idx = np.clip(np.searchsorted(fm.edges, x, side="right") - 1, 0, fm.dim - 1)
        frac = np.clip((x - fm.edges[idx]) / widths[idx], 0.0, 1.0)
        rows = np.arange(len(sigmas))
        return np.clip(cum[rows, idx] + probs[rows, idx] * frac, 0.0, 1.0)
    if dom.is_discrete:
        diag = np.einsum("tii->ti", sigmas).real / traces[:, None]
        cum = np.cumsum(diag, axis=1)
        idx = np.clip(np.floor(x).astype(int), 0, fm.dim - 1)
        return np.clip(cum[np.arange(len(sigmas)), idx], 0.0, 1.0)
    panels = _get_panels(fm)
    cums = panels.panel_cumsums(sigmas)
    xc = np.clip(x, panels.edges[0], panels.edges[-1])
    idx = np.clip(np.searchsorted(panels.edges, xc, side="right") - 1, 0,
                  panels.edges.size - 2)
    partial = panels.partial(sigmas, panels.edges[idx], xc)
    rows = np.arange(len(sigmas))
    return np.clip((cums[rows, idx] + partial) / traces, 0.0, 1.0)


_panel_cache: dict[int, _CdfPanels] = {}


def _get_panels(fm: FeatureMap) -> _CdfPanels:
    key = id(fm)
    hit = _panel_cache.get(key)
    if hit is None or hit._fm is not fm:
        hit = _CdfPanels(fm)
        if len(_panel_cache) > 64:
            _panel_cache.clear()
        _panel_cache[key] = hit
    return hit


def cumulative(fm: FeatureMap, sigma: np.ndarray, x: float) -> float:
    """CDF at ``x`` of the normalized density ``zeta(t) sigma zeta(t)* / tr(sigma)``.

    ``sigma`` must be Hermitian positive semidefinite with positive trace;
    the map must be isometric (the trace then equals the normalizer).
    """
    if not fm.isometric:
        raise ValueError("cumulative needs an isometric map")
    return float(cdf_batch(fm, np.asarray(sigma, dtype=np.complex128)[np.newaxis],
                           np.asarray([float(x)]))[0])
