"""Dense linear algebra and Gaussian quadrature helpers.

Everything works on IEEE binary64; complex matrices are numpy ``complex128``
arrays.  Factorizations are delegated to LAPACK through numpy, with the
conventions pinned down here (sign-fixed QR, ``svd`` returning ``V`` rather
than ``V``-dagger) so callers never depend on backend quirks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_hermite, roots_laguerre, roots_legendre

from .errors import NumericError, RankDeficiencyError

__all__ = [
    "QuadratureRule",
    "svd",
    "qr",
    "hermitian_inv_sqrt",
    "gauss_legendre",
    "gauss_laguerre",
    "gauss_hermite",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for approximating ``integral f(x) dx``.

    For rules on a compact interval the weights sum to the interval length.
    The half-line and real-line constructors fold the Gaussian weight
    function into the feature functions' own decay, see
    :func:`gauss_laguerre` / :func:`gauss_hermite`.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.float64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return self.nodes.size

    def integrate(self, values: np.ndarray) -> complex | float:
        """Sum ``values`` (evaluated at ``nodes``, last axis) against the weights."""
        return (values * self.weights).sum(axis=-1)


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin singular value decomposition ``m = U @ diag(s) @ V.conj().T``.

    Returns
    -------
    (U, s, V)
        ``U`` is ``(r, k)``, ``s`` nonnegative decreasing, ``V`` is ``(c, k)``
        with ``k = min(r, c)``.  Note ``V`` itself is returned, not its
        conjugate transpose.
    """
    a = np.asarray(m)
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # LAPACK iteration cap exceeded
        raise NumericError(f"SVD did not converge: {exc}") from exc
    return u, s, vh.conj().T


def qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with the sign convention fixed: diag(R) real and >= 0.

    The phase ambiguity of LAPACK's Householder QR is removed by absorbing
    the diagonal phases of ``R`` into ``Q``, which makes the factorization
    deterministic and reproducible across backends.
    """
    a = np.asarray(m)
    q, r = np.linalg.qr(a, mode="reduced")
    d = np.diagonal(r).copy()
    phase = np.where(np.abs(d) > 0, d / np.where(np.abs(d) > 0, np.abs(d), 1.0), 1.0)
    q = q * phase[np.newaxis, :]
    r = r * phase.conj()[:, np.newaxis]
    return q, r


def hermitian_inv_sqrt(m: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Inverse square root of a Hermitian positive definite matrix.

    Computed from the spectral decomposition ``m = Q L Q*`` as
    ``Q L^(-1/2) Q*``.  Eigenvalues at or below ``rank_tol`` times the
    largest eigenvalue indicate a numerically rank-deficient overlap and
    raise :class:`~cmps.errors.RankDeficiencyError` naming the offender.
    """
    a = np.asarray(m)
    herm_dev = np.abs(a - a.conj().T).max() if a.size else 0.0
    if herm_dev > 1e-12 * max(1.0, np.abs(a).max()):
        raise ValueError(f"matrix is not Hermitian (max deviation {herm_dev:.3e})")
    w, q = np.linalg.eigh(a)
    cutoff = rank_tol * w[-1] if w.size else 0.0
    if w.size and (w[0] <= cutoff or w[0] <= 0.0):
        raise RankDeficiencyError(
            f"eigenvalue {w[0]:.6e} below rank tolerance {cutoff:.6e}", w[0]
        )
    return (q * (w ** -0.5)[np.newaxis, :]) @ q.conj().T


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> QuadratureRule:
    """Gauss-Legendre rule with ``n`` nodes on ``[a, b]``.

    Exact for polynomials of degree <= 2n-1; weights sum to ``b - a``.
    """
    if n < 1:
        raise ValueError("need at least one node")
    x, w = roots_legendre(n)
    half = 0.5 * (b - a)
    return QuadratureRule(a + half * (x + 1.0), half * w)


def gauss_laguerre(n: int) -> QuadratureRule:
    """Gauss-Laguerre rule: ``integral_0^inf f(x) e^(-x) dx = sum w f(x)``.

    Exact when ``f`` is a polynomial of degree <= 2n-1.  The weights belong
    to the ``e^(-x)``-weighted integral; callers integrating plain ``dx``
    integrands that already contain the exponential decay should multiply
    by ``exp(nodes)`` (cf. ``features`` module, which does this through the
    total-weight transform).
    """
    if n < 1:
        raise ValueError("need at least one node")
    x, w = roots_laguerre(n)
    return QuadratureRule(x, w)


def gauss_hermite(n: int) -> QuadratureRule:
    """Gauss-Hermite rule: ``integral f(x) e^(-x^2) dx = sum w f(x)``.

    Exact for polynomial ``f`` of degree <= 2n-1; weights sum to sqrt(pi).
    """
    if n < 1:
        raise ValueError("need at least one node")
    x, w = roots_hermite(n)
    return QuadratureRule(x, w)
