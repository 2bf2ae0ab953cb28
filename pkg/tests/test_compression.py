"""Compression-layer tests: exact alignment optimality, planted recovery,
and layer plumbing through densities, sampling, and training."""
import numpy as np
import pytest
from conftest import dense_norm_sq

from cmps.compression import (
    CompressionLayer,
    compressed_embed,
    fit_compressed,
    fit_layer,
    procrustes_update,
)
from cmps.features import FeatureMap, embed
from cmps.model import canonicalize, log_density_batch, normalize, random_init
from cmps.sampler import sample
from cmps.trainer import TrainConfig, dmrg_fit, nll


def _amps(u_mat, u_batch, v_batch):
    c = np.einsum("jD,Dd,jd->j", u_batch.conj(), u_mat, v_batch)
    p = np.abs(c)
    return c, p, np.where(p > 0, c / np.where(p > 0, p, 1.0), 1.0)


def _lin_obj(u_mat, u_batch, v_batch, p, phi, eps):
    # Re sum_j (p_j^eps phi_j)^-1 <u_j, U v_j>
    c = np.einsum("jD,Dd,jd->j", u_batch.conj(), u_mat, v_batch)
    return float(np.real(np.sum(p ** (-eps) * np.conj(phi) * c)))


def _rand_isometry(rng, d_full, d_site):
    g = rng.normal(size=(d_full, d_site)) + 1j * rng.normal(size=(d_full, d_site))
    return np.linalg.qr(g)[0]


# ---------------------------------------------------------------------------
# layer container

def test_layer_validates_isometry():
    good = np.eye(4, 2)
    CompressionLayer([good])
    with pytest.raises(ValueError):
        CompressionLayer([np.ones((4, 2))])
    with pytest.raises(ValueError):
        CompressionLayer([np.eye(2, 4)])  # wide matrices can't be isometric


def test_shared_layer_returns_same_matrix():
    layer = CompressionLayer.random(5, 2, seed=1, shared=True)
    assert layer.matrix(0) is layer.matrix(7)
    per_site = CompressionLayer.random(5, 2, n_sites=3, seed=1)
    assert per_site.matrix(0) is not per_site.matrix(1)
    cp = per_site.copy()
    cp.set_matrix(1, np.eye(5, 2, dtype=complex))
    assert not np.allclose(cp.matrix(1), per_site.matrix(1))


def test_factory_layers_are_isometric():
    for layer in (CompressionLayer.truncation(6, 3, n_sites=2),
                  CompressionLayer.random(6, 3, n_sites=2, seed=3)):
        for i in range(2):
            u = layer.matrix(i)
            assert np.allclose(u.conj().T @ u, np.eye(3), atol=1e-12)


def test_compressed_embed_matches_matrix_action():
    fm = FeatureMap.fourier(5)
    layer = CompressionLayer.random(5, 2, seed=4)
    z = embed(fm, 0.37)
    got = compressed_embed(layer, fm, 0, 0.37)
    assert np.allclose(got, layer.matrix(0).conj().T @ z, atol=1e-14)
    xs = np.linspace(0.05, 0.95, 9)
    batch = compressed_embed(layer, fm, 0, xs)
    assert batch.shape == (9, 2)
    assert np.allclose(batch[3], layer.matrix(0).conj().T @ embed(fm, xs[3]),
                       atol=1e-14)


# ---------------------------------------------------------------------------
# the alignment step

def test_alignment_step_beats_random_isometries():
    # The SVD update is the exact maximizer of the linear surrogate; no
    # random isometry may score higher, and the previous matrix never does.
    rng = np.random.default_rng(11)
    t, d_full, d_site = 60, 5, 3
    u_batch = rng.normal(size=(t, d_full)) + 1j * rng.normal(size=(t, d_full))
    v_batch = rng.normal(size=(t, d_site)) + 1j * rng.normal(size=(t, d_site))
    layer = CompressionLayer.random(d_full, d_site, seed=5)
    prev = layer.matrix(0).copy()
    _, p, phi = _amps(prev, u_batch, v_batch)
    eps = 0.7
    procrustes_update(layer, 0, u_batch, v_batch, p, phi, eps)
    new = layer.matrix(0)
    best = _lin_obj(new, u_batch, v_batch, p, phi, eps)
    assert best >= _lin_obj(prev, u_batch, v_batch, p, phi, eps) - 1e-10
    for _ in range(1000):
        cand = _rand_isometry(rng, d_full, d_site)
        assert _lin_obj(cand, u_batch, v_batch, p, phi, eps) <= best + 1e-9
    gram = new.conj().T @ new
    assert np.max(np.abs(gram - np.eye(d_site))) < 1e-10


def test_alignment_recovers_planted_isometry():
    # u_j = U* v_j exactly; iterating the update must drive the matrix to
    # U* (up to a global phase), where the objective hits its analytic
    # maximum mean log ||v_j||^2.
    rng = np.random.default_rng(3)
    d_full, d_site, t = 6, 3, 500
    u_star = _rand_isometry(rng, d_full, d_site)
    v_batch = rng.normal(size=(t, d_site)) + 1j * rng.normal(size=(t, d_site))
    u_batch = v_batch @ u_star.T
    layer = CompressionLayer.random(d_full, d_site, seed=9)
    for _ in range(100):
        _, p, phi = _amps(layer.matrix(0), u_batch, v_batch)
        procrustes_update(layer, 0, u_batch, v_batch, p, phi, eps=1.0)
    u_fit = layer.matrix(0)
    overlap = np.linalg.svd(u_fit.conj().T @ u_star, compute_uv=False)
    angle = np.arccos(np.clip(overlap.min(), -1.0, 1.0))
    assert angle < 1e-3
    _, p, _ = _amps(u_fit, u_batch, v_batch)
    obj = np.log(p).mean()
    obj_star = np.log(np.linalg.norm(v_batch, axis=1) ** 2).mean()
    assert obj <= obj_star + 1e-12          # analytic ceiling
    assert obj >= obj_star - 1e-6


def test_alignment_rank_deficient_keeps_prior_directions():
    # All environments parallel -> the weighted sum is rank one; the update
    # must warn, stay isometric, and not hurt the surrogate.
    rng = np.random.default_rng(7)
    t, d_full, d_site = 40, 5, 2
    v_dir = rng.normal(size=d_site) + 1j * rng.normal(size=d_site)
    v_batch = np.tile(v_dir, (t, 1))
    u_batch = rng.normal(size=(t, d_full)) + 1j * rng.normal(size=(t, d_full))
    layer = CompressionLayer.truncation(d_full, d_site)
    prior = layer.matrix(0).copy()
    _, p, phi = _amps(prior, u_batch, v_batch)
    with pytest.warns(UserWarning, match="rank-deficient"):
        procrustes_update(layer, 0, u_batch, v_batch, p, phi, 0.5)
    new = layer.matrix(0)
    assert np.max(np.abs(new.conj().T @ new - np.eye(d_site))) < 1e-10
    assert (_lin_obj(new, u_batch, v_batch, p, phi, 0.5)
            >= _lin_obj(prior, u_batch, v_batch, p, phi, 0.5) - 1e-10)


def test_alignment_excludes_zero_amplitude_samples():
    rng = np.random.default_rng(13)
    t, d_full, d_site = 30, 4, 2
    u_batch = rng.normal(size=(t, d_full)) + 0j
    v_batch = rng.normal(size=(t, d_site)) + 0j
    layer = CompressionLayer.random(d_full, d_site, seed=2)
    _, p, phi = _amps(layer.matrix(0), u_batch, v_batch)
    p[:5] = 0.0
    with pytest.warns(UserWarning, match="excluded"):
        procrustes_update(layer, 0, u_batch, v_batch, p, phi, 0.5)
    with pytest.raises(ValueError):
        procrustes_update(layer, 0, u_batch, v_batch, np.zeros(t), phi, 0.5)
    with pytest.raises(ValueError):
        procrustes_update(layer, 0, u_batch, v_batch, p, phi, 0.0)
    with pytest.raises(ValueError):
        procrustes_update(layer, 0, u_batch, v_batch, p, phi, 1.5)


# ---------------------------------------------------------------------------
# layers inside models

def _layered_model(seed=0, n_sites=3, d_full=8, d_site=3, chi=2, family="fourier"):
    fms = [getattr(FeatureMap, family)(d_full) for _ in range(n_sites)]
    layer = CompressionLayer([_rand_isometry(np.random.default_rng(seed + 50 + i),
                                             d_full, d_site)
                              for i in range(n_sites)])
    m = random_init(fms, chi, seed=seed, layer=layer)
    return normalize(canonicalize(m, 0))


def test_square_layer_absorbs_into_cores():
    # A full-width unitary layer is pure gauge: folding it into the cores
    # must reproduce densities and samples.
    n_sites, d_full = 3, 4
    fms = [FeatureMap.fourier(d_full) for _ in range(n_sites)]
    layer = CompressionLayer([_rand_isometry(np.random.default_rng(20 + i),
                                             d_full, d_full)
                              for i in range(n_sites)])
    m1 = normalize(canonicalize(random_init(fms, 3, seed=2, layer=layer), 0))
    cores2 = [np.einsum("Dd,ldr->lDr", layer.matrix(i).conj(), m1.cores[i])
              for i in range(n_sites)]
    m2 = normalize(canonicalize(
        type(m1)(cores2, fms, center=m1.center, field=m1.field), 0))
    assert abs(dense_norm_sq(m1) - 1.0) < 1e-9
    rng = np.random.default_rng(1)
    xs = rng.uniform(0, 1, size=(64, n_sites))
    assert np.allclose(log_density_batch(m1, xs), log_density_batch(m2, xs),
                       atol=1e-9)
    s1 = sample(m1, seed=40, count=50)
    s2 = sample(m2, seed=40, count=50)
    assert np.allclose(s1, s2, atol=1e-8)


def test_fit_layer_gain_matches_nll_drop():
    # With isometric features and canonical cores the normalization stays
    # one, so the alignment objective *is* half the log-likelihood: the
    # summed per-site gains must equal the train-NLL drop exactly.
    target = _layered_model(seed=6)
    xs = sample(target, seed=77, count=900)
    m = target.copy()
    m.layer = target.layer.copy()
    rng = np.random.default_rng(15)
    for i in range(m.n_sites):
        bump = m.layer.matrix(i) + 0.25 * (
            rng.normal(size=(8, 3)) + 1j * rng.normal(size=(8, 3)))
        q = np.linalg.svd(bump, full_matrices=False)
        m.layer.set_matrix(i, q[0] @ q[2])
    before = nll(m, xs)
    hist = fit_layer(m, xs)
    after = nll(m, xs)
    for i in range(m.n_sites):
        gains = np.asarray(hist[i])
        assert np.all(np.diff(gains) >= -1e-12)
    total_gain = sum(h[-1] - h[0] for h in hist.values())
    assert after <= before + 1e-9
    assert abs((before - after) - 2.0 * total_gain) < 1e-8
    # and the refit model should be close to the generating one on its data
    assert after <= nll(target, xs) + 0.05


def test_fit_layer_shared_recovers_common_matrix():
    n_sites, d_full, d_site = 4, 6, 2
    fms = [FeatureMap.fourier(d_full) for _ in range(n_sites)]
    u_star = _rand_isometry(np.random.default_rng(31), d_full, d_site)
    layer = CompressionLayer([u_star], shared=True)
    target = normalize(canonicalize(random_init(fms, 2, seed=8, layer=layer), 0))
    xs = sample(target, seed=55, count=1200)
    m = target.copy()
    rng = np.random.default_rng(9)
    bump = u_star + 0.3 * (rng.normal(size=(d_full, d_site))
                           + 1j * rng.normal(size=(d_full, d_site)))
    q = np.linalg.svd(bump, full_matrices=False)
    m.layer = CompressionLayer([q[0] @ q[2]], shared=True)
    before = nll(m, xs)
    hist = fit_layer(m, xs)
    after = nll(m, xs)
    (gains,) = hist.values()
    assert np.all(np.diff(np.asarray(gains)) >= -1e-12)
    assert after <= before + 1e-9
    assert after <= nll(target, xs) + 0.05
    assert m.layer.shared and m.layer.n_matrices == 1


def test_fit_layer_requires_layer():
    fms = [FeatureMap.fourier(3) for _ in range(2)]
    m = normalize(canonicalize(random_init(fms, 2, seed=0), 0))
    with pytest.raises(ValueError):
        fit_layer(m, np.full((10, 2), 0.5))


def test_fit_compressed_improves_and_keeps_input_intact():
    rng = np.random.default_rng(23)
    t = 1200
    base = rng.uniform(-1, 1, size=t)
    xs = np.column_stack([
        np.tanh(1.5 * base) * 0.9,
        np.clip(0.8 * base ** 2 - 0.4 + 0.05 * rng.normal(size=t), -1, 1),
        np.clip(-0.7 * base + 0.05 * rng.normal(size=t), -1, 1),
    ])
    fms = [FeatureMap.legendre(8) for _ in range(3)]
    layer = CompressionLayer.truncation(8, 3, n_sites=3)
    m0 = normalize(canonicalize(random_init(fms, 3, seed=4, layer=layer), 0))
    snapshot = [layer.matrix(i).copy() for i in range(3)]
    cfg = TrainConfig(chi_max=3, sweeps=6, inner_steps=3, step_size=0.1, seed=1)
    fitted, trace = fit_compressed(m0, xs, cfg)
    # the caller's layer must be untouched (the driver works on a copy)
    for i in range(3):
        assert np.array_equal(layer.matrix(i), snapshot[i])
    assert fitted.layer is not layer
    for i in range(3):
        u = fitted.layer.matrix(i)
        assert np.max(np.abs(u.conj().T @ u - np.eye(3))) < 1e-10
    assert nll(fitted, xs) < nll(m0, xs) - 0.3
    assert len(trace) == 6 * 2 * 2   # sweeps x bonds x directions
    assert {rec["sweep"] for rec in trace} == set(range(6))


def test_fit_compressed_beats_plain_truncation():
    # On strongly structured data a trained layer should clearly outperform
    # freezing the first d feature functions.
    rng = np.random.default_rng(29)
    t = 1500
    u = rng.uniform(0, 1, size=t)
    xs = np.column_stack([
        0.5 + 0.45 * np.sin(2 * np.pi * u),
        0.5 + 0.45 * np.cos(2 * np.pi * u) * np.sign(rng.normal(size=t)),
    ])
    xs = np.mod(xs + 0.02 * rng.normal(size=xs.shape), 1.0)
    fms = [FeatureMap.fourier(9) for _ in range(2)]
    cfg = TrainConfig(chi_max=4, sweeps=8, inner_steps=3, step_size=0.1, seed=3)
    frozen = normalize(canonicalize(random_init(
        fms, 4, seed=5, layer=CompressionLayer.truncation(9, 3, n_sites=2)), 0))
    frozen_fit, _ = dmrg_fit(frozen, xs, cfg)
    trained = normalize(canonicalize(random_init(
        fms, 4, seed=5, layer=CompressionLayer.truncation(9, 3, n_sites=2)), 0))
    trained_fit, _ = fit_compressed(trained, xs, cfg)
    assert nll(trained_fit, xs) < nll(frozen_fit, xs) - 0.1
