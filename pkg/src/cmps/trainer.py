"""Two-site DMRG training: merge a bond, descend the NLL, split, move on.

The loss at a bond is scale-invariant,

    L(B) = log ||B||^2 - (1/T) sum_j log |Phi_j(B)|^2,

which equals the batch NLL when every other core is isometric.  Phi is
linear in the bond tensor, so each sample contributes a rank-one term to
the gradient; the batch reduces to two tall GEMMs per step, chunked so the
(T, chi*d) operands never exceed a fixed working-set size.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CanonicalFormError
from .model import ContinuousMPS, canonicalize, log_density_batch, normalize
from .numerics import svd

_CHUNK = 16384
_LOG_FLOOR = -745.0        # log of the smallest positive normal double


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    """Knobs for :func:`dmrg_fit`.

    ``chi_schedule`` gives per-sweep bond caps; when omitted the default
    ramp starts at max(chi_max/2, 5), grows linearly, and holds the final
    five sweeps at ``chi_max``.
    """

    chi_max: int
    sweeps: int = 10
    inner_steps: int = 4
    step_size: float = 0.05
    chi_schedule: list[int] | None = None
    trunc_tol: float = 1e-10
    batch: int | None = None
    seed: int = 0
    field: str = "complex"
    adaptive_step: bool = False

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.chi_max < 1 or self.sweeps < 0 or self.inner_steps < 1:
            raise ValueError("chi_max, inner_steps must be >= 1 and sweeps >= 0")
        if self.trunc_tol < 0:
            raise ValueError("trunc_tol must be nonnegative")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be positive when given")
        if self.chi_schedule is not None:
            sched = [int(c) for c in self.chi_schedule]
            if any(b < a for a, b in zip(sched, sched[1:])):
                raise ValueError("chi_schedule must be nondecreasing")
            if any(c < 1 for c in sched):
                raise ValueError("chi_schedule entries must be >= 1")
            self.chi_schedule = sched

    def caps(self) -> list[int]:
        """Per-sweep bond caps, length ``sweeps``."""
        if self.chi_schedule is not None:
            sched = list(self.chi_schedule)
            if len(sched) < self.sweeps:
                sched += [sched[-1]] * (self.sweeps - len(sched))
            return sched[: self.sweeps]
        s = self.sweeps
        if s <= 5:
            return [self.chi_max] * s
        first = min(self.chi_max, max(round(self.chi_max / 2), 5))
        ramp = s - 5
        out = [min(self.chi_max, round(first + (self.chi_max - first) * k / ramp))
               for k in range(ramp)]
        return out + [self.chi_max] * 5


# ---------------------------------------------------------------------------
# environment cache

class EnvCache:
    """Per-sample boundary vectors on both sides of every site.

    ``left[i]`` holds the contraction of cores/embeddings strictly left of
    site i (shape (T, chi)); ``right[i]`` the mirror image.  Entries are
    refreshed incrementally as the sweep moves, so each bond update touches
    only O(T chi^2 d) work.
    """

    def __init__(self, m: ContinuousMPS, embeds: list[np.ndarray]):
        if len(embeds) != m.n_sites:
            raise ValueError("one embedding matrix per site required")
        t = embeds[0].shape[0]
        self.embeds = embeds
        self.left = [None] * m.n_sites
        self.right = [None] * m.n_sites
        self.left[0] = np.ones((t, 1), dtype=np.complex128)
        self.right[m.n_sites - 1] = np.ones((t, 1), dtype=np.complex128)
        for i in range(m.n_sites - 1, 0, -1):
            self.update_right(m, i)
        for i in range(m.n_sites - 1):
            self.update_left(m, i)

    def update_left(self, m: ContinuousMPS, i: int) -> None:
        """Recompute ``left[i+1]`` from ``left[i]`` and core i."""
        core = m.cores[i]
        l, s, r = core.shape
        le, e = self.left[i], self.embeds[i]
        a = (le[:, :, None] * e[:, None, :]).reshape(-1, l * s)
        self.left[i + 1] = a @ core.reshape(l * s, r)

    def update_right(self, m: ContinuousMPS, i: int) -> None:
        """Recompute ``right[i-1]`` from ``right[i]`` and core i."""
        core = m.cores[i]
        l, s, r = core.shape
        re, e = self.right[i], self.embeds[i]
        a = (e[:, :, None] * re[:, None, :]).reshape(-1, s * r)
        self.right[i - 1] = a @ core.reshape(l, s * r).T


# ---------------------------------------------------------------------------
# operations on a single bond

def merge_bond(m: ContinuousMPS, i: int) -> np.ndarray:
    """Contract cores i and i+1 into a (chi_l, d_i, d_{i+1}, chi_r) tensor."""
    if m.center not in (i, i + 1):
        raise CanonicalFormError(f"merge_bond({i}) needs the center at {i} or {i + 1}")
    return np.einsum("ldm,mer->lder", m.cores[i], m.cores[i + 1])


def split_bond(bond: np.ndarray, direction: str, chi_cap: int, trunc_tol: float):
    """Factor a bond tensor back into two cores by truncated SVD.

    Keeps the smallest rank whose discarded squared singular weight is at
    most ``trunc_tol * ||bond||^2``, further capped at ``chi_cap``; the
    orthogonality center ends up on the side named by ``direction``
    ("left" or "right").  Returns (core_i, core_i1, discarded_weight).
    """
    if direction not in ("left", "right"):
        raise ValueError("direction must be 'left' or 'right'")
    l, d1, d2, r = bond.shape
    u, s, v = svd(bond.reshape(l * d1, d2 * r))
    total = float((s ** 2).sum())
    tail = np.concatenate([np.cumsum((s ** 2)[::-1])[::-1], [0.0]])  # tail[k] = sum s_i^2, i >= k
    keep = s.size
    while keep > 1 and tail[keep - 1] <= trunc_tol * total:
        keep -= 1
    keep = max(1, min(keep, int(chi_cap)))
    discarded = float(tail[keep])
    u, s, v = u[:, :keep], s[:keep], v[:, :keep]
    if direction == "right":
        core_a = u.reshape(l, d1, keep)
        core_b = (s[:, None] * v.conj().T).reshape(keep, d2, r)
    else:
        core_a = (u * s[None, :]).reshape(l, d1, keep)
        core_b = v.conj().T.reshape(keep, d2, r)
    return core_a, core_b, discarded


def _phi_chunks(bond_mat, left, e1, e2, right):
    """Yield (slice, A, C, phi) per chunk; A = L (x) E1 rows, C = E2 (x) R rows."""
    t = left.shape[0]
    l = left.shape[1]
    d2 = e2.shape[1]
    for a in range(0, t, _CHUNK):
        sl = slice(a, min(a + _CHUNK, t))
        ab = (left[sl][:, :, None] * e1[sl][:, None, :]).reshape(-1, l * e1.shape[1])
        cb = (e2[sl][:, :, None] * right[sl][:, None, :]).reshape(-1, d2 * right.shape[1])
        phi = np.einsum("tk,tk->t", ab @ bond_mat, cb)
        yield sl, ab, cb, phi


def _batch_phi(bond, left, e1, e2, right):
    l, d1, d2, r = bond.shape
    bm = bond.reshape(l * d1, d2 * r)
    phi = np.empty(left.shape[0], dtype=np.complex128)
    for sl, _, _, ph in _phi_chunks(bm, left, e1, e2, right):
        phi[sl] = ph
    return phi


def _phi_and_grad_sum(bond, left, e1, e2, right):
    """Phi for every sample plus sum_j conj(G_j / Phi_j), excluding Phi=0 rows."""
    l, d1, d2, r = bond.shape
    bm = bond.reshape(l * d1, d2 * r)
    phi = np.empty(left.shape[0], dtype=np.complex128)
    acc = np.zeros((l * d1, d2 * r), dtype=np.complex128)
    excluded = 0
    for sl, ab, cb, ph in _phi_chunks(bm, left, e1, e2, right):
        phi[sl] = ph
        w = np.zeros_like(ph)
        nz = ph != 0
        excluded += int(ph.size - nz.sum())
        w[nz] = 1.0 / ph[nz]
        acc += ((ab * w[:, None]).T @ cb).conj()
    return phi, acc, excluded


def bond_gradient(bond: np.ndarray, cache: EnvCache, i: int) -> np.ndarray:
    """Gradient of the scale-invariant batch NLL with respect to bond (i, i+1).

    The convention is the steepest-descent direction for the real and
    imaginary parts jointly: g = 2 (B / ||B||^2 - mean_j conj(G_j / Phi_j))
    with G_j the sample's linear environment.  Zero-density samples are
    excluded from the mean and counted via a warning.
    """
    phi, acc, excluded = _phi_and_grad_sum(
        bond, cache.left[i], cache.embeds[i], cache.embeds[i + 1], cache.right[i + 1])
    if excluded:
        warnings.warn(f"{excluded} zero-density samples excluded from bond gradient")
    t_incl = phi.size - excluded
    if t_incl == 0:
        raise ValueError("every sample has zero density; gradient undefined")
    nsq = float((np.abs(bond) ** 2).sum())
    g = 2.0 * (bond / nsq - acc.reshape(bond.shape) / t_incl)
    return g.real if not np.iscomplexobj(bond) else g


def _clamped_log_abs2(phi):
    out = np.full(phi.shape, _LOG_FLOOR)
    nz = phi != 0
    out[nz] = np.maximum(2.0 * np.log(np.abs(phi[nz])), _LOG_FLOOR)
    return out, int(phi.size - nz.sum())


def nll(m: ContinuousMPS, xs: np.ndarray) -> float:
    """Mean negative log density over the rows of ``xs``.

    Zero-density rows contribute the clamp value exp(-745) and are counted
    in a warning; for continuous data the result may be negative.
    """
    logp = log_density_batch(m, np.asarray(xs, dtype=np.float64))
    clamped = int(np.sum(~np.isfinite(logp)) + np.sum(logp < _LOG_FLOOR))
    if clamped:
        warnings.warn(f"{clamped} zero-density samples clamped in nll")
    return float(-np.mean(np.clip(np.nan_to_num(logp, neginf=_LOG_FLOOR),
                                  _LOG_FLOOR, None)))


# ---------------------------------------------------------------------------
# the sweep driver

def _bond_update(m, cache, i, cfg, cap, direction, step_state):
    left, right = cache.left[i], cache.right[i + 1]
    e1, e2 = cache.embeds[i], cache.embeds[i + 1]
    bond = merge_bond(m, i)
    lr = step_state["lr"]
    prev_loss = None
    for _ in range(cfg.inner_steps):
        phi, acc, excluded = _phi_and_grad_sum(bond, left, e1, e2, right)
        t_incl = phi.size - excluded
        if t_incl == 0:
            raise ValueError("every sample has zero density at bond "
                             f"{i}; cannot train")
        nsq = float((np.abs(bond) ** 2).sum())
        if cfg.adaptive_step:
            logs, _ = _clamped_log_abs2(phi)
            loss = np.log(nsq) - logs.mean()
            if prev_loss is not None and loss > prev_loss:
                lr *= 0.5
            prev_loss = loss
        g = 2.0 * (bond / nsq - acc.reshape(bond.shape) / t_incl)
        if not np.iscomplexobj(bond):
            g = g.real
        bond = bond - lr * g
    step_state["lr"] = lr
    phi = _batch_phi(bond, left, e1, e2, right)
    logs, _ = _clamped_log_abs2(phi)
    batch_nll = float(np.log((np.abs(bond) ** 2).sum()) - logs.mean())
    bond /= np.sqrt((np.abs(bond) ** 2).sum())
    core_a, core_b, discarded = split_bond(bond, direction, cap, cfg.trunc_tol)
    m.cores[i], m.cores[i + 1] = core_a, core_b
    m.center = i + 1 if direction == "right" else i
    center_core = m.cores[m.center]
    center_core /= np.linalg.norm(center_core)
    m._norm_sq = 1.0
    if direction == "right":
        cache.update_left(m, i)
    else:
        cache.update_right(m, i + 1)
    return {"batch_nll": batch_nll, "discarded_weight": discarded,
            "chi_after": core_a.shape[2]}


def dmrg_fit(m: ContinuousMPS, xs: np.ndarray, cfg: TrainConfig, callbacks=None):
    """Fit the chain to data by two-site sweeps; returns (model, loss trace).

    The input model is not mutated.  Each sweep is a full left-to-right
    then right-to-left pass; the loss trace gets one record per bond
    update.  A non-finite batch loss aborts and returns the state after
    the last completed sweep.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != m.n_sites:
        raise ValueError(f"dataset must be (T, {m.n_sites})")
    if callbacks is None:
        callbacks = []
    elif callable(callbacks):
        callbacks = [callbacks]
    if cfg.sweeps == 0:
        return m.copy(), []

    m = normalize(canonicalize(m.copy(), 0))
    caps = cfg.caps()
    trace = []
    snapshot = m.copy()
    n = m.n_sites
    for sweep in range(cfg.sweeps):
        if cfg.batch is not None and cfg.batch < xs.shape[0]:
            rng = np.random.Generator(np.random.Philox(
                key=np.array([cfg.seed % (1 << 64), sweep], dtype=np.uint64)))
            rows = xs[rng.choice(xs.shape[0], size=cfg.batch, replace=False)]
        else:
            rows = xs
        embeds = [m.embed_site(i, rows[:, i]) for i in range(n)]
        cache = EnvCache(m, embeds)
        step_state = {"lr": cfg.step_size}
        finite = True
        bonds = [(k, "right") for k in range(n - 1)] + \
                [(k, "left") for k in range(n - 2, -1, -1)]
        for k, direction in bonds:
            rec = _bond_update(m, cache, k, cfg, caps[sweep], direction, step_state)
            rec.update(sweep=sweep, bond=k, direction=direction)
            trace.append(rec)
            for cb in callbacks:
                cb(rec)
            if not np.isfinite(rec["batch_nll"]):
                finite = False
                break
        if not finite:
            warnings.warn(f"non-finite loss in sweep {sweep}; "
                          "returning the last completed sweep's model")
            return snapshot, trace
        snapshot = m.copy()
    return m, trace


def write_loss_trace(path, trace) -> None:
    """CSV with columns sweep, bond, batch_nll, discarded_weight, chi_after."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "bond", "batch_nll", "discarded_weight", "chi_after"])
        for rec in trace:
            w.writerow([rec["sweep"], rec["bond"],
                        format(rec["batch_nll"], ".17g"),
                        format(rec["discarded_weight"], ".17g"),
                        rec["chi_after"]])
