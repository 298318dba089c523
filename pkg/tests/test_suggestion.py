import numpy as np
import pytest
from hypothesis import given, strategies as st

from acelsr import datastore, learncore as lc, sim, suggestion
from acelsr.datastore import SMDataset
from conftest import OracleSuggester, oracle_index


def test_cluster_partition_and_noise():
    rng = np.random.default_rng(0)
    blobs = np.concatenate([rng.normal(0, 0.05, (10, 3)), rng.normal(5, 0.05, (10, 3)), [[50.0, 50, 50]]])
    c = suggestion.cluster_embeddings(blobs, 2)
    assert len(c) == 21
    assert len(set(c[:10])) == 1 and len(set(c[10:20])) == 1
    assert c[0] != c[10]
    # the outlier becomes its own singleton cluster
    assert c[20] not in set(c[:20])
    assert sorted(set(c)) == list(range(len(set(c))))
    assert len(suggestion.cluster_embeddings(np.zeros((0, 3)))) == 0
    assert suggestion.cluster_embeddings(np.zeros((1, 3))).tolist() == [0]


@given(st.integers(0, 10**6))
def test_clusters_renumbered_by_first_appearance(seed):
    rng = np.random.default_rng(seed)
    c = suggestion.cluster_embeddings(rng.normal(size=(15, 2)), 2)
    seen = []
    for x in c:
        if x not in seen:
            seen.append(x)
    assert seen == list(range(len(seen)))


def test_index_unions(small_ds):
    emb = np.array([[0.0], [0.1], [9.0]])
    idx = suggestion._finish_index(emb, np.array([0, 0, 1]), [frozenset({1}), frozenset({2}), frozenset({5})])
    assert idx.cluster_actions == [frozenset({1, 2}), frozenset({5})]
    assert idx.lookup(np.array([[0.2], [8.0]])) == [frozenset({1, 2}), frozenset({5})]


def test_oracle_suggestions_are_valid(cfg, small_ds, graph):
    idx = oracle_index(cfg, small_ds)
    sm = OracleSuggester(cfg)
    anchors = set(sm.enc.labels(datastore.action_anchors(small_ds)[0]).tolist())
    # fresh renders of every anchor state get exactly the applicable actions of that state
    states = sim.enumerate_states(cfg)
    labs = sorted(anchors)[:40]
    obs = np.stack([sim.render(states[k], cfg, 1000 + k).pixels for k in labs])
    for lab, acts in zip(labs, suggestion.suggest_many(idx, sm, obs)):
        assert acts == frozenset(graph.succ[lab])
    assert suggestion.suggest(idx, sm, obs[0]) == frozenset(graph.succ[labs[0]])


def test_trained_index_roundtrip(tiny_models, small_ds, tmp_path):
    models = tiny_models[0]
    datastore.save(models.sm_index, tmp_path / "idx.acepack")
    back = datastore.load(tmp_path / "idx.acepack")
    assert np.array_equal(back.cluster, models.sm_index.cluster)
    assert back.cluster_actions == models.sm_index.cluster_actions
    sug = suggestion.suggest_many(back, models.sm, small_ds.obs_a[:5])
    assert sug == suggestion.suggest_many(models.sm_index, models.sm, small_ds.obs_a[:5])
    assert all(isinstance(s, frozenset) and s for s in sug)


def test_errors(small_ds):
    obs = np.zeros((3, 32, 32, 3), np.float32)
    only_sim = SMDataset(obs, np.array([0, 1]), np.array([1, 2]), np.array([1, 1]), [])
    with pytest.raises(suggestion.DegenerateDataset):
        suggestion.train_sm(only_sim, lc.TrainConfig(epochs=1))
    with pytest.raises(suggestion.EmptyIndex):
        suggestion.build_index(None, small_ds.take(np.flatnonzero(small_ds.a == 0)))
    empty = suggestion._finish_index(np.zeros((0, 2)), np.zeros(0, int), [])
    with pytest.raises(suggestion.EmptyIndex):
        suggestion.suggest(empty, None, obs[0])


def test_bin_actions():
    acts = np.array([[0.1, 0.1, 0.9, 0.9], [0.2, 0.15, 0.8, 0.95], [0.9, 0.1, 0.1, 0.1], [1.0, 1.0, 1.0, 1.0]])
    t = suggestion.bin_actions(acts, 0.5)
    assert t.n_bins_per_axis == 2
    assert len(t) == 3
    assert t.assign(acts).tolist() == [0, 0, 1, 2]
    assert np.allclose(t.means[0], acts[:2].mean(axis=0))
    assert t.bin_key([1.0, 1.0, 1.0, 1.0]) == (1, 1, 1, 1)
    assert len(suggestion.bin_actions(acts, 0.5, pick_only=True)) == 3
    assert len(suggestion.bin_actions(acts, 1.0)) == 1
    with pytest.raises(ValueError):
        suggestion.bin_actions(acts, 0.0)
    assert t.assign([[0.3, 0.9, 0.0, 0.0]]).tolist() == [-1]


def test_contrastive_loss_values():
    net = lc.init_mlp([2, 2], seed=0, hidden="linear", out="linear")
    net = net.with_arrays([np.eye(2, dtype=np.float64), np.zeros(2)])
    feats = np.array([[0.0, 0.0], [0.3, 0.4], [2.0, 0.0]])
    loss, _ = suggestion.contrastive_loss(net, feats, np.array([0, 0]), np.array([1, 2]), np.array([1, 0]), 1.0)
    # similar pair at L1 distance 0.7; dissimilar pair already past the margin
    assert loss == pytest.approx((lc.attract(np.array([0.7]))[0] + 0.0) / 2)
