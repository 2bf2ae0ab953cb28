"""End-to-end quality gates for the whole package.

Every test here retrains or rebuilds models from scratch at fixed seeds
and checks an externally meaningful quantity (integrals, divergences,
classification accuracy) against a fixed threshold, printing exactly one
``gate NN ... PASS/FAIL`` line.  Run with ``-s`` (or read failure output)
to see the measured numbers.  The slowest gates train for tens of
minutes; ``-m "not extended"`` skips the longest one.
"""

import math

import numpy as np
import pytest
from scipy import stats

from cmps.compression import CompressionLayer, fit_compressed
from cmps.data import (gen_compressible, gen_rotated_cube, gen_two_moons,
                       gen_xy_model, kfold_indices, load_iris, rescale)
from cmps.evaluation import kl_knn, kl_quadrature, xy_marginal_kl
from cmps.features import (DomainTag, FeatureMap, isometrize, overlap_matrix,
                           prior_density)
from cmps.model import (ContinuousMPS, canonicalize, evaluate_batch,
                        log_density_batch, marginal, norm_sq, normalize,
                        random_init, to_dense)
from cmps.sampler import classify, sample
from cmps.trainer import (EnvCache, TrainConfig, bond_gradient, dmrg_fit,
                          merge_bond, nll)


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"gate {num:02d} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def _ramp(chi: int, sweeps: int = 18, hold: int = 5) -> list:
    """Bond-dimension schedule: start at max(chi/2, 5), grow linearly,
    sit at chi for the last ``hold`` sweeps."""
    start = min(chi, max(chi // 2, 5))
    n_ramp = sweeps - hold
    ks = [start + (chi - start) * t / max(n_ramp - 1, 1) for t in range(n_ramp)]
    return [int(round(v)) for v in ks] + [chi] * hold


def _protocol(chi: int, seed: int = 0, field: str = "complex",
              sweeps: int = 18, step: float = 0.05) -> TrainConfig:
    return TrainConfig(chi_max=chi, sweeps=sweeps, inner_steps=4,
                       step_size=step, chi_schedule=_ramp(chi, sweeps),
                       seed=seed, field=field)


# ---------------------------------------------------------------- gate 1

def _family_instances(dim: int):
    return {
        "fourier": FeatureMap.fourier(dim),
        "legendre": FeatureMap.legendre(dim),
        "laguerre": FeatureMap.laguerre(dim),
        "hermite": FeatureMap.hermite(dim),
        "indicator": FeatureMap.indicator(np.linspace(0.0, 1.0, dim + 1)),
    }


def test_gate_01_isometrization_all_families():
    worst = 0.0
    for dim in range(2, 17):
        for name, fm in _family_instances(dim).items():
            iso = isometrize(fm)
            dev = float(np.max(np.abs(overlap_matrix(iso) - np.eye(iso.dim))))
            worst = max(worst, dev)
    _report(1, "feature isometrization", worst < 1e-8,
            f"max overlap deviation {worst:.2e} over all families, D=2..16")


# ---------------------------------------------------------------- gate 2

_PROBES = {
    "fourier": np.linspace(0.03, 0.97, 20),
    "legendre": np.linspace(-0.95, 0.95, 20),
    "laguerre": np.linspace(0.05, 6.0, 20),
    "hermite": np.linspace(-2.2, 2.2, 20),
    "indicator": (np.arange(20) + 0.5) / 20.0,
}


def test_gate_02_random_init_marginal_law():
    n_init = 1000
    worst_sigma = 0.0
    for fam, fm in _family_instances(7).items():
        probes = _PROBES[fam]
        want = prior_density(fm, probes)
        maps = [fm] * 3
        vals = np.empty((n_init, probes.size))
        for i in range(n_init):
            m = normalize(canonicalize(
                random_init(maps, chi=5, seed=10_000 + i), 0))
            vals[i] = [marginal(m, [x]) for x in probes]
        se = vals.std(axis=0, ddof=1) / math.sqrt(n_init)
        sigmas = np.abs(vals.mean(axis=0) - want) / se
        worst_sigma = max(worst_sigma, float(sigmas.max()))
    # the D -> infinity limit of the polynomial-family law at the center
    dens0 = float(prior_density(FeatureMap.legendre(40), 0.0))
    rel = abs(dens0 - 1.0 / math.pi) * math.pi
    ok = worst_sigma < 3.0 and rel < 0.05
    _report(2, "random-init marginal law", ok,
            f"worst deviation {worst_sigma:.2f} sigma (1000 inits); "
            f"deep-basis center density off by {rel:.3f} rel")


# ---------------------------------------------------------------- gate 3

def _grid_rule(a: float, b: float, cells: int, deg: int):
    """Per-cell Gauss nodes/weights covering [a, b] with ``cells`` bins."""
    x, w = np.polynomial.legendre.leggauss(deg)
    edges = np.linspace(a, b, cells + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
    return edges, np.array(nodes), np.array(weights)


def test_gate_03_normalization_and_sampling():
    configs = [
        ([FeatureMap.fourier(6, DomainTag.periodic(0.0, 1.0))] * 2, 4, 31),
        ([FeatureMap.legendre(5)] * 2, 6, 32),
    ]
    worst_int = 0.0
    worst_stat = 0.0
    for maps, chi, seed in configs:
        m = normalize(canonicalize(random_init(maps, chi=chi, seed=seed), 0))
        a, b = maps[0].domain.a, maps[0].domain.b
        edges, nodes, weights = _grid_rule(a, b, 16, 8)
        flat_n, flat_w = nodes.ravel(), weights.ravel()
        gx, gy = np.meshgrid(flat_n, flat_n, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        dens = np.exp(log_density_batch(m, pts)).reshape(flat_n.size, flat_n.size)
        total = float(flat_w @ dens @ flat_w)
        worst_int = max(worst_int, abs(total - 1.0))

        # fold the node grid back to 16x16 cell masses (uniform edges, so
        # every cell shares the same local weight vector)
        cell = dens.reshape(16, 8, 16, 8)
        mass = np.einsum("iajb,a,b->ij", cell, weights[0], weights[0])
        t = 100_000
        draws = sample(m, seed=seed + 1, count=t)
        hist, _, _ = np.histogram2d(draws[:, 0], draws[:, 1],
                                    bins=[edges, edges])
        exp = mass * t
        small = exp < 5.0
        obs_main, exp_main = hist[~small], exp[~small]
        if small.any():
            obs_main = np.append(obs_main, hist[small].sum())
            exp_main = np.append(exp_main, exp[small].sum())
        stat = float(((obs_main - exp_main) ** 2 / exp_main).sum())
        crit = stats.chi2.ppf(0.99, obs_main.size - 1)
        worst_stat = max(worst_stat, stat / crit)
    ok = worst_int < 1e-5 and worst_stat < 1.0
    _report(3, "normalization and perfect sampling", ok,
            f"|integral-1| {worst_int:.1e}; chi2/critical {worst_stat:.2f}")


# ---------------------------------------------------------------- gate 4

def _dense_checks(m: ContinuousMPS, rng) -> float:
    dense = to_dense(m)
    n = m.n_sites
    pts = np.column_stack([
        (rng.integers(0, dom.cardinality, 25).astype(float)
         if dom.is_discrete else rng.uniform(dom.a, dom.b, 25))
        for dom in (m.feature_maps[i].domain for i in range(n))])
    errs = []
    phis = evaluate_batch(m, pts)
    for r in range(25):
        val = dense
        for i in range(n):
            e = m.embed_site(i, pts[r, i:i + 1])[0]
            val = np.tensordot(val, e, axes=([0], [0]))
        errs.append(abs(val - phis[r]) / max(1.0, abs(val)))
    errs.append(abs(norm_sq(m) - float(np.sum(np.abs(dense) ** 2)))
                / max(1.0, norm_sq(m)))
    mc = normalize(canonicalize(m, 0))
    dense_c = to_dense(mc)
    x1 = pts[0, 0]
    e1 = mc.embed_site(0, np.array([x1]))[0]
    v = np.tensordot(dense_c, e1, axes=([0], [0]))
    want = float(np.sum(np.abs(v) ** 2)) / norm_sq(mc)
    errs.append(abs(marginal(mc, [x1]) - want) / max(1.0, want))
    return float(max(errs))


def test_gate_04_dense_tensor_equivalence():
    rng = np.random.default_rng(77)
    worst = 0.0
    lay = CompressionLayer.truncation(6, 3, n_sites=3, shared=False)
    models = [
        random_init([FeatureMap.legendre(4)] * 3, chi=3, seed=41),
        random_init([FeatureMap.fourier(6)] * 3, chi=4, seed=42, layer=lay),
        random_init([FeatureMap.legendre(4)] * 3, chi=3, seed=43, field="real"),
        random_init([FeatureMap.fourier(5),
                     FeatureMap.categorical(4)], chi=3, seed=44),
    ]
    for m in models:
        worst = max(worst, _dense_checks(m, rng))
    _report(4, "dense-tensor equivalence", worst < 1e-9,
            f"max relative deviation {worst:.2e}")


# ---------------------------------------------------------------- gate 5

def _bond_loss(bond, cache, i):
    from cmps.trainer import _batch_phi
    left, right = cache.left[i], cache.right[i + 1]
    phi = _batch_phi(bond, left, cache.embeds[i], cache.embeds[i + 1], right)
    nsq = float((np.abs(bond) ** 2).sum())
    return math.log(nsq) - float(np.mean(2.0 * np.log(np.abs(phi))))


def test_gate_05_bond_gradient_finite_differences():
    rng = np.random.default_rng(55)
    worst = 0.0
    for seed, field in ((1, "complex"), (2, "real")):
        maps = [FeatureMap.legendre(3)] * 3
        m = normalize(canonicalize(random_init(maps, chi=3, seed=seed,
                                               field=field), 1))
        xs = rng.uniform(-1, 1, size=(30, 3))
        cache = EnvCache(m, [m.embed_site(i, xs[:, i]) for i in range(3)])
        bond = merge_bond(m, 1)
        g = bond_gradient(bond, cache, 1).ravel()
        h = 1e-6
        steps = ((h, np.real), (1j * h, np.imag)) if field == "complex" \
            else ((h, np.real),)
        for j in rng.choice(bond.size, size=min(20, bond.size), replace=False):
            for step, comp in steps:
                bp, bm = bond.copy(), bond.copy()
                bp.ravel()[j] += step
                bm.ravel()[j] -= step
                fd = (_bond_loss(bp, cache, 1) - _bond_loss(bm, cache, 1)) / (2 * h)
                worst = max(worst, abs(fd - comp(g[j])) / max(1.0, abs(fd)))
    _report(5, "bond gradient vs finite differences", worst < 1e-5,
            f"max relative error {worst:.2e} over 20 coordinates x 2 fields")


# ---------------------------------------------------------------- gate 6

def _fit_cube(vals, log_scale, size, field):
    maps = [FeatureMap.fourier(size, DomainTag.compact(0.0, 1.0))
            for _ in range(5)]
    m = random_init(maps, chi=size, seed=0, field=field)
    m2, _ = dmrg_fit(m, vals, _protocol(size, field=field, step=0.1))
    return nll(m2, vals) - log_scale + 0.4246


def test_gate_06_uniform_cube_scaling():
    ds = gen_rotated_cube(80_000, seed=11)
    ds01, _ = rescale(ds, [(0.0, 1.0)] * 5)
    vals, ls = ds01.values, ds01.log_scale
    sizes = [3, 7, 11, 15, 19]
    kls = [_fit_cube(vals, ls, s, "complex") for s in sizes]
    kl_real = _fit_cube(vals, ls, 11, "real")
    steps = sum(kls[i + 1] < kls[i] for i in range(len(kls) - 1))
    frac = steps / (len(sizes) - 1)
    kl_complex_11 = kls[sizes.index(11)]
    ok = frac >= 0.9 and min(kls) < 0.5 and kl_complex_11 < kl_real
    _report(6, "uniform-cube capacity scaling", ok,
            f"KL at sizes {sizes} = {[round(k, 3) for k in kls]}; "
            f"decreasing fraction {frac:.2f}; best {min(kls):.3f}; "
            f"complex {kl_complex_11:.3f} vs real {kl_real:.3f} at 11")


# ---------------------------------------------------------------- gate 7

def test_gate_07_two_moons_excess_nll():
    train = gen_two_moons(10_000, sigma=0.1, seed=7)
    prep, _ = rescale(train, [(0.05, 0.95), (0.05, 0.95)], columns=[0, 1])
    maps = [FeatureMap.fourier(17, DomainTag.compact(0.0, 1.0))] * 2 \
        + [FeatureMap.categorical(2)]
    m2, _ = dmrg_fit(random_init(maps, chi=8, seed=0), prep.values,
                     _protocol(8))
    test = gen_two_moons(20_000, sigma=0.1, seed=8)
    offs = np.array([s[0] for s in prep.scaling])
    scl = np.array([s[1] for s in prep.scaling])
    held = (test.to_original() - offs) * scl
    inside = np.all((held[:, :2] >= 0.0) & (held[:, :2] <= 1.0), axis=1)
    excess = nll(m2, held[inside]) - prep.log_scale - train.entropy
    _report(7, "two-moons excess NLL", excess <= 0.05,
            f"held-out excess {excess:.4f} "
            f"({inside.mean() * 100:.1f}% of fresh rows in range)")


# ---------------------------------------------------------------- gate 8

def test_gate_08_iris_crossvalidation():
    ds = load_iris()
    prep, _ = rescale(ds, [(0.0, 1.0)] * 4, columns=[0, 1, 2, 3])
    maps = [FeatureMap.fourier(7, DomainTag.compact(-0.05, 1.05))] * 4 \
        + [FeatureMap.categorical(3)]
    folds = kfold_indices(prep.values[:, -1].astype(int), k=5, seed=0)
    val_nll, val_acc = [], []
    for tr, va in folds:
        m = random_init(maps, chi=9, seed=0)
        m2, _ = dmrg_fit(m, prep.values[tr], _protocol(9, sweeps=20))
        hold = prep.values[va]
        val_nll.append(nll(m2, hold))
        ready = normalize(canonicalize(m2, 0))
        probs = classify(ready, hold[:, :-1])
        val_acc.append(float(np.mean(
            np.argmax(probs, axis=1) == hold[:, -1].astype(int))))
    mean_nll = float(np.mean(val_nll))
    mean_acc = float(np.mean(val_acc))
    ok = mean_nll <= -1.2 and mean_acc >= 0.90
    _report(8, "iris cross-validation", ok,
            f"mean val NLL {mean_nll:.3f} +- {np.std(val_nll, ddof=1):.3f} "
            f"(unit-interval features); accuracy {mean_acc:.3f}")


# ---------------------------------------------------------------- gate 9

def test_gate_09_compression_layer_quality():
    ds = gen_compressible(20_000, seed=5)

    def maps_of(dim):
        return [FeatureMap.legendre(dim, DomainTag.compact(d.a, d.b))
                for d in ds.domains]

    cfg = _protocol(4)
    ma, _ = dmrg_fit(random_init(maps_of(16), chi=4, seed=0), ds.values, cfg)
    mb, _ = dmrg_fit(random_init(maps_of(3), chi=4, seed=0), ds.values, cfg)
    layer = CompressionLayer.truncation(16, 3, n_sites=4, shared=False)
    mc, _ = fit_compressed(random_init(maps_of(16), chi=4, seed=0, layer=layer),
                           ds.values, cfg, layer_every=1)
    nll_a, nll_b, nll_c = (nll(x, ds.values) for x in (ma, mb, mc))
    ok = abs(nll_c - nll_a) <= 0.3 and (nll_b - nll_c) >= 2.0
    _report(9, "compression layer quality", ok,
            f"full {nll_a:.3f}, small {nll_b:.3f}, compressed {nll_c:.3f}; "
            f"|compressed-full| {abs(nll_c - nll_a):.3f}, "
            f"gap over small {nll_b - nll_c:.3f}")


# --------------------------------------------------------------- gate 10

@pytest.mark.extended
def test_gate_10_planar_rotor_lattice():
    ds = gen_xy_model(20_000, temperature=0.8, shape=(4, 4), burn_in=500,
                      thinning=10, seed=3, n_chains=100)
    maps = [FeatureMap.fourier(13, ds.domains[k]) for k in range(16)]
    m = random_init(maps, chi=12, seed=0)
    m2, _ = dmrg_fit(m, ds.values, _protocol(12))
    draws = sample(m2, seed=1, count=20_000)
    kl = kl_knn(ds.values, draws, k=10, domains=ds.domains)
    marg = xy_marginal_kl(ds.values, draws, k=10)
    ok = kl <= 0.8 and marg["corn"] <= 0.05
    _report(10, "planar-rotor lattice", ok,
            f"joint kNN KL {kl:.3f}; corner-correlation KL {marg['corn']:.4f} "
            f"(neighbor {marg['neigh']:.4f})")


# --------------------------------------------------------------- gate 11

def test_gate_11_knn_divergence_calibration():
    rng = np.random.default_rng(99)
    q = rng.normal(0.0, 1.0, size=(100_000, 1))
    p = rng.normal(1.0, 1.0, size=(100_000, 1))
    est = kl_knn(q, p, k=10)
    ok = abs(est - 0.5) <= 0.05
    _report(11, "kNN divergence calibration", ok,
            f"estimated {est:.4f} for closed-form 0.5")


# --------------------------------------------------------------- gate 12

_KAPPA, _LAM = 1.5, 0.75


def _rotor_pair_pdf():
    def raw(pts):
        return np.exp(_KAPPA * np.cos(2 * np.pi * (pts[:, 0] - pts[:, 1]))
                      + _LAM * np.cos(2 * np.pi * pts[:, 0]))
    g = (np.arange(512) + 0.5) / 512
    gx, gy = np.meshgrid(g, g, indexing="ij")
    z = float(np.mean(raw(np.column_stack([gx.ravel(), gy.ravel()]))))
    return lambda pts: raw(pts) / z, math.exp(_KAPPA + _LAM) / z


def _embed_into(m, dim, chi):
    maps = [FeatureMap.fourier(dim, DomainTag.periodic(0.0, 1.0))] * 2
    cores = []
    for i, c in enumerate(m.cores):
        left = 1 if i == 0 else chi
        right = 1 if i == len(m.cores) - 1 else chi
        new = np.zeros((left, dim, right), dtype=np.complex128)
        new[:c.shape[0], :c.shape[1], :c.shape[2]] = c
        cores.append(new)
    return ContinuousMPS(cores, maps, field=m.field)


def test_gate_12_capacity_monotone_kl():
    pdf, cap = _rotor_pair_pdf()
    rng = np.random.default_rng(42)
    chunks, tot = [], 0
    while tot < 100_000:
        cand = rng.random((200_000, 2))
        keep = rng.random(200_000) * cap <= pdf(cand)
        chunks.append(cand[keep])
        tot += int(keep.sum())
    data = np.concatenate(chunks)[:100_000]
    box = [(0.0, 1.0), (0.0, 1.0)]

    def fit(m0, chi, seed):
        cfg = TrainConfig(chi_max=chi, sweeps=14, inner_steps=6,
                          step_size=0.1, seed=seed, batch=20_000)
        m2, _ = dmrg_fit(m0, data, cfg)
        return m2, kl_quadrature(m2, pdf, box=box)

    best = {}
    for dim in (2, 4, 8):
        for chi in (2, 4, 8):
            maps = [FeatureMap.fourier(dim, DomainTag.periodic(0.0, 1.0))] * 2
            cands = [random_init(maps, chi=chi, seed=s) for s in (0, 1)]
            if (dim // 2, chi) in best:
                cands.append(_embed_into(best[(dim // 2, chi)][0], dim, chi))
            if (dim, chi // 2) in best:
                cands.append(_embed_into(best[(dim, chi // 2)][0], dim, chi))
            runs = [fit(c, chi, s) for s, c in enumerate(cands)]
            best[(dim, chi)] = min(runs, key=lambda r: r[1])
    grid = {k: v[1] for k, v in best.items()}
    slack = 1e-9
    rows_ok = all(grid[(d, 2)] + slack >= grid[(d, 4)]
                  and grid[(d, 4)] + slack >= grid[(d, 8)] for d in (2, 4, 8))
    cols_ok = all(grid[(2, c)] + slack >= grid[(4, c)]
                  and grid[(4, c)] + slack >= grid[(8, c)] for c in (2, 4, 8))
    detail = "; ".join(f"D{d}/chi{c}={grid[(d, c)]:.4f}"
                       for d in (2, 4, 8) for c in (2, 4, 8))
    _report(12, "capacity-monotone divergence", rows_ok and cols_ok, detail)
