import numpy as np
import pytest

from acelsr import datastore, learncore as lc, lpm as lpm_mod
from acelsr.roadmap import CoveredSpace


@pytest.fixture(scope="module")
def lpm(tiny_models):
    return tiny_models[0].lpm


def test_predict_broadcast(lpm):
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, lpm.latent_dim))
    u = np.array([0, 3, 7, 7, 47])
    full = lpm.predict(z, u)
    assert full.shape == (5, lpm.latent_dim)
    assert np.allclose(lpm.predict(z[0], u)[1], lpm.predict(z[0], 3), atol=1e-6)
    assert np.allclose(lpm.predict(z, 7)[2], full[2], atol=1e-6)
    assert lpm.predict(z[0], 3).shape == (lpm.latent_dim,)
    assert np.array_equal(lpm_mod.predict(lpm, z, u), full)


def test_unknown_action_and_shape(lpm):
    z = np.zeros(lpm.latent_dim)
    for bad in (-1, 48):
        with pytest.raises(lpm_mod.UnknownAction):
            lpm.predict(z, bad)
    with pytest.raises(lc.ShapeError):
        lpm.predict(np.zeros(lpm.latent_dim + 1), 0)


def test_reliability_gate(lpm):
    z = np.zeros((1, lpm.latent_dim))
    pred = lpm.predict(z[0], 5)
    dist = np.abs(pred).sum()
    inside = CoveredSpace(z, eps=dist * 1.01)
    assert lpm_mod.predict_reliable(lpm, z[0], 5, inside) is not None
    # shrinking the gate can only drop predictions
    kept = [lpm_mod.predict_reliable(lpm, z[0], 5, inside, rho) is not None for rho in (2.0, 1.0, 0.9, 0.5)]
    assert kept == sorted(kept, reverse=True)
    assert kept[-1] is False
    # with the gate at 1 the rule is the covered-space membership itself
    assert (lpm_mod.predict_reliable(lpm, z[0], 5, inside, 1.0) is not None) == bool(inside.contains(pred))


def test_no_action_pairs(small_ds, oracle):
    sim_only = small_ds.take(np.flatnonzero(small_ds.a == 0))
    with pytest.raises(lpm_mod.NoActionPairs):
        lpm_mod.train_lpm(sim_only, oracle, lc.TrainConfig(epochs=1))


def test_learns_displacement(small_ds, oracle):
    # exact latent inputs: oracle one-hot codes; the fit should beat predicting "no change"
    m = lpm_mod.train_lpm(small_ds, oracle, lc.TrainConfig(epochs=60, seed=0), hidden=(64,))
    rows = np.flatnonzero(small_ds.a == 1)
    z0, z1 = oracle.encode(small_ds.obs_a[rows]), oracle.encode(small_ds.obs_b[rows])
    err = np.mean((m.predict(z0, small_ds.u[rows]) - z1) ** 2)
    assert err < np.mean((z0 - z1) ** 2)


def test_pack_roundtrip(lpm, tmp_path):
    datastore.save(lpm, tmp_path / "lpm.acepack")
    back = datastore.load(tmp_path / "lpm.acepack")
    z = np.ones((3, lpm.latent_dim))
    assert np.array_equal(back.predict(z, [1, 2, 3]), lpm.predict(z, [1, 2, 3]))
