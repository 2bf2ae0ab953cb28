"""Model-quality metrics.

Two KL routes: an exact-by-quadrature path for models with at most three
sites (tensor-product Gauss rules, adaptively refined in one dimension so
integrable log singularities at density zeros do not poison the result),
and a k-nearest-neighbour estimator for sample sets in high dimension.
Also: the closed-form entropy of the noisy two-moons distribution and the
correlation marginals used to score 4x4 planar-rotor models.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings

import numpy as np
from scipy.spatial import cKDTree

from .data import moons_entropy
from .model import ContinuousMPS, log_density_batch
from .numerics import gauss_legendre

__all__ = [
    "kl_quadrature",
    "kl_knn",
    "two_moons_entropy",
    "xy_correlation_marginals",
    "xy_marginal_kl",
    "config_hash",
    "write_metrics",
    "read_metrics",
]

# Radius floor substituted for exact-duplicate neighbours in kl_knn.
JITTER = 1e-12

# Per-split acceptance tolerance and depth/panel caps for the adaptive
# one-dimensional rule.  Depth 48 reaches panel widths ~1e-14 of the
# original interval, enough for any integrable log singularity.
_SPLIT_TOL = 1e-10
_MAX_DEPTH = 48
_MAX_PANELS = 4096


def _check_pdf_values(q: np.ndarray) -> np.ndarray:
    """Validate reference-density evaluations; clip roundoff negatives."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    scale = q.max(initial=0.0)
    if np.any(q < -1e-12 * max(scale, 1.0)):
        raise ValueError("reference pdf returned negative values")
    return np.maximum(q, 0.0)


def _cell_contribution(m, true_pdf, pts, w):
    """sum_j w_j q_j (log q_j - log p_j) over one block of nodes.

    Returns ``(value, dead_node)`` where ``dead_node`` is a point at which
    the model density is exactly zero while the reference is positive
    (None when no such node exists).  Nodes with q = 0 contribute nothing.
    """
    q = _check_pdf_values(true_pdf(pts))
    if q.shape[0] != pts.shape[0]:
        raise ValueError("true_pdf must return one value per row")
    logp = log_density_batch(m, pts)
    active = q > 0.0
    dead = active & ~np.isfinite(logp)
    if np.any(dead):
        return math.inf, pts[int(np.argmax(dead))]
    val = float(np.sum(w[active] * q[active] * (np.log(q[active]) - logp[active])))
    return val, None


def _axis_rule(dom, box_i, nodes: int):
    """Quadrature nodes/weights for one axis (counting measure if discrete)."""
    if dom.is_discrete:
        return np.arange(dom.cardinality, dtype=np.float64), np.ones(dom.cardinality)
    if box_i is not None:
        a, b = float(box_i[0]), float(box_i[1])
        if not b > a:
            raise ValueError("box entries must be increasing pairs")
    elif dom.kind in ("compact", "periodic"):
        a, b = dom.a, dom.b
    else:
        raise ValueError(
            "axis with unbounded domain: pass box=[(a, b), ...] to bound the integral")
    rule = gauss_legendre(nodes, a, b)
    return rule.nodes, rule.weights


def _warn_dead(pt) -> None:
    warnings.warn(
        "model density vanishes where the reference pdf is positive "
        f"(node {np.asarray(pt).ravel()}); KL is +inf",
        RuntimeWarning, stacklevel=3)


def _kl_adaptive_1d(m, true_pdf, a, b, nodes):
    """Composite Gauss rule on [a, b], bisecting panels until converged.

    A single n-node panel is exponentially accurate wherever log P is
    smooth; near a zero of P the bisection grades panel widths
    geometrically into the singularity, so the whole log tail is resolved
    to the split tolerance.  Returns +inf via the dead-node contract if a
    node lands exactly on a zero of P where Q > 0.
    """

    def panel(lo, hi):
        rule = gauss_legendre(nodes, lo, hi)
        return _cell_contribution(m, true_pdf, rule.nodes[:, None], rule.weights)

    total = 0.0
    first, dead = panel(a, b)
    if dead is not None:
        _warn_dead(dead)
        return math.inf
    stack = [(a, b, first, 0)]
    n_panels = 1
    while stack:
        lo, hi, coarse, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, dead = panel(lo, mid)
        if dead is None:
            right, dead = panel(mid, hi)
        if dead is not None:
            _warn_dead(dead)
            return math.inf
        fine = left + right
        if abs(fine - coarse) <= _SPLIT_TOL or depth >= _MAX_DEPTH or n_panels >= _MAX_PANELS:
            if n_panels >= _MAX_PANELS and abs(fine - coarse) > _SPLIT_TOL:
                warnings.warn("adaptive quadrature hit the panel budget; "
                              "result may carry extra error", RuntimeWarning)
            total += fine
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
            n_panels += 1
        # panels whose refinement already agrees are final; nothing re-visits them
    return total


def kl_quadrature(m: ContinuousMPS, true_pdf, box=None, nodes: int = 64) -> float:
    """KL(Q || P) = integral Q log(Q/P) with Q the reference pdf, P the model.

    ``true_pdf`` maps an (T, N) array of points to T density values; it is
    assumed normalized over the integration region.  Each continuous axis
    gets a ``nodes``-point Gauss rule over its domain interval (``box``
    overrides per axis and is mandatory for unbounded domains); categorical
    axes are summed exactly.  With one site the rule is refined adaptively,
    which keeps integrable log singularities of the model density from
    biasing the estimate.  If the model density is exactly zero at a node
    where the reference is positive, the divergence is reported as +inf
    with a warning naming the node.
    """
    n = m.n_sites
    if n > 3:
        raise ValueError("tensor-product quadrature is limited to 3 sites")
    if box is not None:
        box = list(box)
        if len(box) != n:
            raise ValueError("box needs one (a, b) pair per site")
    else:
        box = [None] * n

    if n == 1 and not m.feature_maps[0].domain.is_discrete:
        dom = m.feature_maps[0].domain
        if box[0] is not None:
            a, b = float(box[0][0]), float(box[0][1])
            if not b > a:
                raise ValueError("box entries must be increasing pairs")
        elif dom.kind in ("compact", "periodic"):
            a, b = dom.a, dom.b
        else:
            raise ValueError(
                "axis with unbounded domain: pass box=[(a, b)] to bound the integral")
        return _kl_adaptive_1d(m, true_pdf, a, b, nodes)

    rules = [_axis_rule(fm.domain, box[i], nodes) for i, fm in enumerate(m.feature_maps)]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    pts = np.column_stack([g.reshape(-1) for g in grids])
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    w = np.ones(pts.shape[0])
    for g in wgrids:
        w *= g.reshape(-1)
    val, dead = _cell_contribution(m, true_pdf, pts, w)
    if dead is not None:
        _warn_dead(dead)
        return math.inf
    return val


def _wrap_columns(arr: np.ndarray, domains) -> np.ndarray:
    """Shift periodic samples onto [0, L) per axis for toroidal k-d trees."""
    out = np.array(arr, dtype=np.float64)
    for j, dom in enumerate(domains):
        wrapped = np.mod(out[:, j] - dom.a, dom.length)
        out[:, j] = np.where(wrapped < dom.length, wrapped, 0.0)
    return out


def kl_knn(samples_q, samples_p, k: int = 10, domains=None, workers: int = -1) -> float:
    """k-nearest-neighbour estimate of KL(Q || P) from two sample sets.

    With T reference samples x_i ~ Q and T' model samples ~ P, the estimate
    is ``(dim/T) sum_i log(s_k(x_i) / r_k(x_i)) + log(T' / (T - 1))`` where
    r_k is the k-th neighbour radius of x_i among the other Q-samples and
    s_k among the P-samples.  Distances are Euclidean on the raw feature
    scale; pass ``domains`` with all-periodic tags to use wrapped distance
    on the torus (mixed periodic/non-periodic axes are not supported).
    Zero radii from duplicate points are floored at 1e-12 with a warning.
    """
    q = np.ascontiguousarray(np.asarray(samples_q, dtype=np.float64))
    p = np.ascontiguousarray(np.asarray(samples_p, dtype=np.float64))
    if q.ndim != 2 or p.ndim != 2:
        raise ValueError("sample sets must be (rows, dims) arrays")
    if q.shape[1] != p.shape[1]:
        raise ValueError("sample sets must share a dimension")
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    if q.shape[0] < k + 1 or p.shape[0] < k:
        raise ValueError("need at least k+1 reference and k model samples")

    boxsize = None
    if domains is not None:
        domains = list(domains)
        if len(domains) != q.shape[1]:
            raise ValueError("domains needs one tag per column")
        n_per = sum(1 for d in domains if d.kind == "periodic")
        if n_per == len(domains):
            q = _wrap_columns(q, domains)
            p = _wrap_columns(p, domains)
            boxsize = np.array([d.length for d in domains])
        elif n_per > 0:
            raise ValueError("mixed periodic and non-periodic columns are not supported")

    tree_q = cKDTree(q, boxsize=boxsize)
    tree_p = cKDTree(p, boxsize=boxsize)
    # k+1 among the reference set: the nearest hit is the query point itself.
    r = tree_q.query(q, k=[k + 1], workers=workers)[0].reshape(-1)
    s = tree_p.query(q, k=[k], workers=workers)[0].reshape(-1)
    n_zero = int(np.count_nonzero(r == 0.0) + np.count_nonzero(s == 0.0))
    if n_zero:
        warnings.warn(f"{n_zero} zero k-NN radii from duplicate points; "
                      f"floored at {JITTER:g}", RuntimeWarning)
        r = np.maximum(r, JITTER)
        s = np.maximum(s, JITTER)
    dim = q.shape[1]
    t_q, t_p = q.shape[0], p.shape[0]
    return float(dim / t_q * np.sum(np.log(s / r)) + math.log(t_p / (t_q - 1)))


def two_moons_entropy(sigma: float) -> float:
    """Differential entropy of the noisy two-moons distribution (closed form)."""
    return moons_entropy(sigma)


def xy_correlation_marginals(samples, bins: int = 40):
    """Correlation scalars of 4x4 planar-rotor samples, with histograms.

    ``samples`` is a (rows, 16) array of angles, sites row-major, so column
    0 is the (1,1) corner, column 1 its right neighbour, and column 15 the
    opposite (4,4) corner.  Returns a dict with the per-row values of
    ``cos(x_00 - x_01)`` (key ``"neigh"``) and ``cos(x_00 - x_33)`` (key
    ``"corn"``) plus density-normalized histograms on [-1, 1].
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 16:
        raise ValueError("expected (rows, 16) angles from a 4x4 lattice, row-major")
    neigh = np.cos(arr[:, 0] - arr[:, 1])
    corn = np.cos(arr[:, 0] - arr[:, 15])
    hist_neigh, edges = np.histogram(neigh, bins=bins, range=(-1.0, 1.0), density=True)
    hist_corn, _ = np.histogram(corn, bins=bins, range=(-1.0, 1.0), density=True)
    return {"neigh": neigh, "corn": corn,
            "hist_neigh": hist_neigh, "hist_corn": hist_corn, "edges": edges}


def xy_marginal_kl(reference, model, k: int = 10):
    """kl_knn between the correlation marginals of two 16-column sample sets.

    The reference (MCMC ground truth) plays the role of Q, matching the
    orientation of likelihood-based scores.  The cosines live on [-1, 1],
    so plain Euclidean distance applies.
    """
    a = xy_correlation_marginals(reference)
    b = xy_correlation_marginals(model)
    return {"neigh": kl_knn(a["neigh"][:, None], b["neigh"][:, None], k=k),
            "corn": kl_knn(a["corn"][:, None], b["corn"][:, None], k=k)}


def config_hash(config) -> str:
    """Short stable digest of a JSON-serializable configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def write_metrics(path, metrics, config=None) -> None:
    """Flat CSV report: one (metric, value, config_hash) row per entry."""
    digest = config_hash(config if config is not None else {})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "config_hash"])
        for name, value in metrics.items():
            writer.writerow([name, repr(float(value)), digest])


def read_metrics(path):
    """Inverse of :func:`write_metrics`: returns ``(metrics dict, hash)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value", "config_hash"]:
        raise ValueError(f"{path}: not a metrics report")
    metrics = {name: float(val) for name, val, _ in rows[1:]}
    digest = rows[1][2] if len(rows) > 1 else config_hash({})
    return metrics, digest
