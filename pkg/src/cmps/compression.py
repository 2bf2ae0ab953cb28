"""Trainable feature-compression layer: per-site D x d isometries.

A layer maps each site's rich D-dimensional embedding down to the core's
d-dimensional index, ``zeta -> U^+ zeta``.  The isometries are trained by
iterated linear alignment: with the rest of the chain frozen, each sample
contributes an amplitude c_j = <zeta_j | U | v_j> that is linear in U, and
the phase/magnitude-weighted sum of outer products turns the log-amplitude
objective into an orthogonal Procrustes problem solved exactly by an SVD
with all singular values snapped to one.
"""

from __future__ import annotations

import warnings

import numpy as np

from .model import ContinuousMPS, canonicalize, normalize
from .numerics import svd
from .trainer import EnvCache, TrainConfig, dmrg_fit

P_FLOOR = 1e-12          # samples with |amplitude| below this are excluded
EPS_MIN = 2.0 ** -6      # give up on a site when the stabilizer drops below this


class CompressionLayer:
    """Per-site isometries U_i (D_i x d_i) with U_i^+ U_i = I.

    With ``shared=True`` a single matrix is used at every site (the sites
    must then agree on D and d).
    """

    def __init__(self, matrices, shared: bool = False):
        if shared:
            matrices = [np.asarray(matrices[0] if isinstance(matrices, (list, tuple))
                                   else matrices, dtype=np.complex128)]
        else:
            matrices = [np.asarray(u, dtype=np.complex128) for u in matrices]
        for u in matrices:
            if u.ndim != 2 or u.shape[0] < u.shape[1]:
                raise ValueError("each matrix must be D x d with D >= d")
            gram = u.conj().T @ u
            if np.max(np.abs(gram - np.eye(u.shape[1]))) > 1e-10:
                raise ValueError("compression matrices must be isometric")
        self._mats = matrices
        self.shared = shared

    def matrix(self, i: int) -> np.ndarray:
        return self._mats[0] if self.shared else self._mats[i]

    def set_matrix(self, i: int, u: np.ndarray) -> None:
        if self.shared:
            self._mats[0] = u
        else:
            self._mats[i] = u

    @property
    def n_matrices(self) -> int:
        return len(self._mats)

    def copy(self) -> "CompressionLayer":
        return CompressionLayer([u.copy() for u in self._mats], shared=self.shared)

    @staticmethod
    def truncation(dim_full: int, dim_site: int, n_sites: int = 1,
                   shared: bool = False) -> "CompressionLayer":
        """Keep the first ``dim_site`` feature functions at every site."""
        u = np.eye(dim_full, dim_site, dtype=np.complex128)
        mats = [u.copy()] if shared else [u.copy() for _ in range(n_sites)]
        return CompressionLayer(mats, shared=shared)

    @staticmethod
    def random(dim_full: int, dim_site: int, n_sites: int = 1, seed: int = 0,
               shared: bool = False) -> "CompressionLayer":
        rng = np.random.default_rng(seed)
        mats = []
        for _ in range(1 if shared else n_sites):
            g = rng.normal(size=(dim_full, dim_site)) \
                + 1j * rng.normal(size=(dim_full, dim_site))
            q, _ = np.linalg.qr(g)
            mats.append(q)
        return CompressionLayer(mats, shared=shared)


def compressed_embed(layer: CompressionLayer, fm, i: int, x) -> np.ndarray:
    """U_i^+ zeta(x): the effective site embedding under the layer."""
    arr = np.asarray(x, dtype=np.float64)
    e = fm.embed_batch(np.atleast_1d(arr))
    out = e @ layer.matrix(i).conj()
    return out[0] if arr.ndim == 0 else out


def _polar_isometry(b: np.ndarray, prior: np.ndarray, rtol: float = 1e-12):
    """argmax of Re tr(B^+ U) over isometries U, with null directions kept
    from ``prior`` (and a warning) when B is rank-deficient."""
    d = b.shape[1]
    p_mat, s, q_mat = svd(b)
    rank = int(np.sum(s > rtol * (s[0] if s.size and s[0] > 0 else 1.0)))
    if rank >= d:
        return p_mat[:, :d] @ q_mat[:, :d].conj().T
    warnings.warn(f"rank-deficient alignment matrix (rank {rank} < {d}); "
                  "keeping prior directions for the null space")
    cols = p_mat[:, :rank]
    if rank:
        comp = np.linalg.qr(cols, mode="complete")[0][:, rank:]
    else:
        comp = np.eye(b.shape[0], dtype=np.complex128)
    want = comp.conj().T @ (prior @ q_mat[:, rank:d])
    basis = np.linalg.svd(want, full_matrices=True)[0]
    fill = comp @ basis[:, : d - rank]
    return np.column_stack([cols, fill]) @ q_mat[:, :d].conj().T


def procrustes_update(layer: CompressionLayer, i: int, u_batch, v_batch,
                      p, phi, eps: float) -> np.ndarray:
    """One linear-alignment step for site i; returns (and installs) the new U_i.

    ``u_batch`` rows are raw embeddings, ``v_batch`` rows the conjugated
    bond environments, ``p``/``phi`` the amplitude magnitudes and phases at
    the current layer.  Zero-amplitude samples are excluded and counted.
    """
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must be in (0, 1]")
    p = np.asarray(p, dtype=np.float64)
    keep = p > P_FLOOR
    dropped = int(p.size - keep.sum())
    if dropped:
        warnings.warn(f"{dropped} zero-amplitude samples excluded from alignment")
    if not keep.any():
        raise ValueError("no usable samples for the alignment step")
    w = p[keep] ** (-eps) * np.asarray(phi)[keep]
    b = np.einsum("j,jD,jd->Dd", w, np.asarray(u_batch)[keep],
                  np.asarray(v_batch)[keep].conj(), optimize=True)
    new_u = _polar_isometry(b, prior=layer.matrix(i))
    layer.set_matrix(i, new_u)
    return new_u


def _bond_env(m: ContinuousMPS, cache: EnvCache, i: int) -> np.ndarray:
    """Conjugated per-sample environment of site i's feature leg, shape (T, d):
    the amplitude is c_j = zeta_j^+ U_i v_j, linear in U_i."""
    v_env = np.einsum("tl,lsr,tr->ts", cache.left[i], m.cores[i], cache.right[i],
                      optimize=True)
    return v_env.conj()


def _amplitudes(u_mat, raw, v):
    c = np.einsum("jD,Dd,jd->j", raw.conj(), u_mat, v, optimize=True)
    p = np.abs(c)
    phi = np.where(p > 0, c / np.where(p > 0, p, 1.0), 1.0)
    return c, p, phi


def _objective(p: np.ndarray) -> float:
    return float(np.log(np.maximum(p, P_FLOOR)).mean())


def _align_site(layer, i, raw, v, eps_start, max_iters, tol):
    """Iterated alignment of one matrix with its environments frozen."""
    eps = eps_start
    _, p, _ = _amplitudes(layer.matrix(i), raw, v)
    obj = _objective(p)
    hist = [obj]
    for _ in range(max_iters):
        prev = layer.matrix(i).copy()
        _, p, phi = _amplitudes(prev, raw, v)
        procrustes_update(layer, i, raw, v, p, phi, eps)
        _, p_new, _ = _amplitudes(layer.matrix(i), raw, v)
        new_obj = _objective(p_new)
        if new_obj < obj:
            layer.set_matrix(i, prev)
            eps *= 0.5
            if eps < EPS_MIN:
                break
            continue
        moved = new_obj - obj
        obj = new_obj
        hist.append(obj)
        eps = min(1.0, eps * 1.25)
        if moved < tol:
            break
    return hist


def fit_layer(m: ContinuousMPS, xs: np.ndarray, eps_start: float = 0.5,
              max_iters: int = 20, tol: float = 1e-6):
    """Optimize every compression matrix in place against the frozen chain.

    Per-site layers are aligned one site at a time, left to right; while a
    site's matrix iterates, its environments do not involve that matrix, so
    each step costs two small GEMMs and the boundary vectors are refreshed
    once per site.  A step that lowers the mean log-amplitude objective is
    rolled back and retried with a halved stabilizer; when the stabilizer
    falls below 2^-6 the site keeps its previous matrix.  Returns the
    per-site objective history.
    """
    if m.layer is None:
        raise ValueError("model has no compression layer")
    xs = np.asarray(xs, dtype=np.float64)
    raw = [m.feature_maps[i].embed_batch(xs[:, i]) for i in range(m.n_sites)]
    layer = m.layer
    if not layer.shared:
        cache = EnvCache(m, [raw[i] @ layer.matrix(i).conj()
                             for i in range(m.n_sites)])
        history = {}
        for i in range(m.n_sites):
            v = _bond_env(m, cache, i)
            history[i] = _align_site(layer, i, raw[i], v, eps_start,
                                     max_iters, tol)
            cache.embeds[i] = raw[i] @ layer.matrix(i).conj()
            if i + 1 < m.n_sites:
                cache.update_left(m, i)
        return history

    # Shared matrix: every environment depends on it, so each candidate step
    # is scored with freshly built boundary vectors over all sites pooled.
    def pooled(u_mat):
        embeds = [r @ u_mat.conj() for r in raw]
        cache = EnvCache(m, embeds)
        vs = [_bond_env(m, cache, i) for i in range(m.n_sites)]
        cs = [_amplitudes(u_mat, raw[i], vs[i]) for i in range(m.n_sites)]
        p_all = np.concatenate([c[1] for c in cs])
        return vs, p_all

    eps = eps_start
    vs, p_all = pooled(layer.matrix(0))
    obj = _objective(p_all)
    hist = [obj]
    for _ in range(max_iters):
        prev = layer.matrix(0).copy()
        u_cat = np.concatenate(raw)
        v_cat = np.concatenate(vs)
        _, p, phi = _amplitudes(prev, u_cat, v_cat)
        procrustes_update(layer, 0, u_cat, v_cat, p, phi, eps)
        vs_new, p_new = pooled(layer.matrix(0))
        new_obj = _objective(p_new)
        if new_obj < obj:
            layer.set_matrix(0, prev)
            eps *= 0.5
            if eps < EPS_MIN:
                break
            continue
        moved = new_obj - obj
        obj = new_obj
        vs = vs_new
        hist.append(obj)
        eps = min(1.0, eps * 1.25)
        if moved < tol:
            break
    return {tuple(range(m.n_sites)): hist}


def fit_compressed(m: ContinuousMPS, xs: np.ndarray, cfg: TrainConfig,
                   layer_every: int = 1, callbacks=None):
    """Interleave DMRG sweeps with layer-alignment passes.

    Runs ``cfg.sweeps`` sweeps; after every ``layer_every``-th sweep the
    compression matrices are refit against the current chain.  Returns
    (trained model, loss trace).
    """
    if m.layer is None:
        raise ValueError("model has no compression layer")
    caps = cfg.caps()
    trace = []
    current = m.copy()
    current.layer = m.layer.copy()
    for sweep in range(cfg.sweeps):
        sub = TrainConfig(chi_max=cfg.chi_max, sweeps=1, inner_steps=cfg.inner_steps,
                          step_size=cfg.step_size, chi_schedule=[caps[sweep]],
                          trunc_tol=cfg.trunc_tol, batch=cfg.batch,
                          seed=cfg.seed + sweep, field=cfg.field,
                          adaptive_step=cfg.adaptive_step)
        current, t = dmrg_fit(current, xs, sub, callbacks=callbacks)
        for rec in t:
            rec["sweep"] = sweep
        trace.extend(t)
        if (sweep + 1) % layer_every == 0:
            fit_layer(current, xs)
            current = normalize(canonicalize(current, 0))
    return current, trace
