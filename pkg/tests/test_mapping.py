import numpy as np
import pytest

from acelsr import datastore, learncore as lc, mapping
from acelsr.mapping import LatentStats, MMWeights


def test_epsilon_arithmetic():
    s = LatentStats(1.0, 0.5)
    assert mapping.epsilon(s, -0.25) == pytest.approx(0.875)
    assert mapping.epsilon(s, 0.0) == 1.0
    ws = sorted(mapping.W_EPS_GRID)
    eps = [mapping.epsilon(s, w) for w in ws]
    assert eps == sorted(eps)
    # never collapses to zero or below
    assert mapping.epsilon(LatentStats(0.1, 1.0), -0.65) == mapping.EPS_FLOOR


def test_w_grid():
    assert mapping.W_EPS_GRID == (-0.65, -0.55, -0.45, -0.35, -0.25, -0.15, -0.05)


def test_latent_stats_by_hand(small_ds, oracle):
    st = mapping.latent_stats(oracle, small_ds)
    # same state on both sides: zero distance under the oracle embedding
    assert st == LatentStats(0.0, 0.0)
    with pytest.raises(mapping.NoSimilarPairs):
        mapping.latent_stats(oracle, small_ds.take(np.flatnonzero(small_ds.a == 1)))


def test_encode_decode(tiny_models, small_ds):
    mm = tiny_models[0].mm
    z = mm.encode(small_ds.obs_a[:10])
    assert z.shape == (10, 8) and np.all(np.isfinite(z))
    assert np.array_equal(z, mm.encode(small_ds.obs_a[:10]))
    assert np.allclose(mm.encode(small_ds.obs_a[0]), z[0], atol=1e-5)  # float32 BLAS blocking differs by batch size
    img = mm.decode(z)
    assert img.shape == (10, 32, 32, 3)
    assert img.min() >= 0 and img.max() <= 1
    assert mm.decode(z[0]).shape == (32, 32, 3)
    with pytest.raises(lc.ShapeError):
        mm.encode(np.zeros((2, 16, 16, 3)))
    with pytest.raises(lc.ShapeError):
        mm.decode(np.zeros((2, 3)))


def test_peak_normalize_removes_brightness():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(4, 12))
    assert np.allclose(mapping.peak_normalize(0.6 * x), mapping.peak_normalize(x))
    assert np.allclose(mapping.peak_normalize(x).max(axis=1), 1.0)


def test_action_term_separates(cfg):
    # one similar pair and one action pair, repeated; the action term should pull and push
    ds = datastore.generate_dataset(cfg, 40, 0.5, seed=3)
    w = MMWeights(beta_kl=0.0, gamma_action=50.0, d_m=5.0)
    mm = mapping.train_mm(ds, lc.TrainConfig(epochs=40, batch_size=20, seed=0), w, latent_dim=4, hidden=(32,))
    za, zb = mm.encode(ds.obs_a), mm.encode(ds.obs_b)
    d = lc.l1_distance(za, zb)
    assert d[ds.a == 0].mean() < d[ds.a == 1].mean()
    assert mm.trace[-1] < mm.trace[0]


def test_reconstruction_improves_without_action_term(cfg):
    ds = datastore.generate_dataset(cfg, 4, 0.0, seed=0).take(np.zeros(8, int))
    w = MMWeights(beta_kl=0.0, gamma_action=0.0)
    mm = mapping.train_mm(ds, lc.TrainConfig(epochs=60, batch_size=8, seed=0), w, latent_dim=2, hidden=(16,))
    assert mm.trace[-1] < 0.5 * mm.trace[0]


def test_pack_roundtrip(tiny_models, small_ds, tmp_path):
    mm = tiny_models[0].mm
    datastore.save(mm, tmp_path / "mm.acepack")
    back = datastore.load(tmp_path / "mm.acepack")
    assert np.array_equal(back.encode(small_ds.obs_a[:5]), mm.encode(small_ds.obs_a[:5]))
    assert back.weights == mm.weights
