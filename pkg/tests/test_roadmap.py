import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from acelsr import datastore, roadmap
from acelsr.roadmap import CoveredSpace, Edge, Roadmap

points_st = st.integers(0, 10**6).map(lambda s: np.random.default_rng(s).uniform(0, 4, size=(
    np.random.default_rng(s).integers(1, 40), 2)))


def same_partition(a, b):
    return len(set(zip(a.tolist(), b.tolist()))) == len(set(a.tolist())) == len(set(b.tolist()))


@given(points_st, st.floats(0.05, 1.5), st.integers(1, 4))
def test_dbscan_matches_reference(pts, eps, min_samples):
    ours = roadmap.dbscan(pts, eps, min_samples)
    ref = DBSCAN(eps=eps, min_samples=min_samples, metric="manhattan").fit(pts).labels_
    # noise and core membership agree; border points may legally attach to either neighbour
    assert np.array_equal(ours == -1, ref == -1)
    core = np.array([len(nb) >= min_samples for nb in cKDTree(pts).query_ball_point(pts, eps, p=1)])
    assert same_partition(ours[core], ref[core])


@given(points_st, st.floats(0.05, 1.5))
def test_dbscan_single_sample_is_connected_components(pts, eps):
    g = nx.Graph()
    g.add_nodes_from(range(len(pts)))
    d = np.abs(pts[:, None] - pts[None]).sum(-1)
    g.add_edges_from(zip(*np.nonzero(d <= eps)))
    comps = sorted(nx.connected_components(g), key=min)
    expected = np.empty(len(pts), dtype=int)
    for k, c in enumerate(comps):
        expected[list(c)] = k
    assert np.array_equal(roadmap.dbscan(pts, eps, 1), expected)


def random_roadmap(seed, n=12, p=0.25):
    rng = np.random.default_rng(seed)
    edges = {(i, j): Edge(int(rng.integers(48)), np.zeros(4, np.float32))
             for i in range(n) for j in range(n) if i != j and rng.random() < p}
    return Roadmap(rng.normal(size=(n, 3)).astype(np.float32), [np.array([k]) for k in range(n)],
                   np.arange(n, dtype=np.int32), edges, np.random.default_rng(0).uniform(size=(48, 4)), 0.5)


@given(st.integers(0, 10**6))
def test_shortest_paths_match_networkx(seed):
    rm = random_roadmap(seed)
    g = nx.DiGraph(list(rm.edges))
    g.add_nodes_from(range(rm.n_nodes))
    for s, t in [(0, 5), (3, 11), (7, 7)]:
        try:
            ref = sorted(nx.all_shortest_paths(g, s, t))
        except nx.NetworkXNoPath:
            with pytest.raises(roadmap.NoPath):
                rm.shortest_paths(s, t)
            continue
        assert rm.shortest_paths(s, t, max_paths=10**6) == ref
        assert rm.shortest_paths(s, t, max_paths=2) == ref[:2]


def test_shortcuts_append_only():
    rm = random_roadmap(1)
    before = dict(rm.edges)
    missing = next((i, j) for i in range(12) for j in range(12) if i != j and (i, j) not in rm.edges)
    rm2 = rm.add_shortcut(*missing, 7)
    assert rm.edges == before
    assert {k: v for k, v in rm2.edges.items() if k in before} == before
    assert rm2.edges[missing].provenance == "shortcut" and rm2.edges[missing].action == 7
    assert rm2.add_shortcut(*missing, 9) is rm2
    rm3, added = roadmap.with_shortcuts(rm2, [(*missing, 3), (*missing, 3)])
    assert added == 0 and rm3.edges == rm2.edges
    with pytest.raises(roadmap.UnknownNode):
        rm.add_shortcut(0, 99, 1)
    with pytest.raises(ValueError):
        rm.add_shortcut(2, 2, 1)


def test_covered_space():
    cs = CoveredSpace(np.array([[0.0, 0.0], [3.0, 0.0]]), eps=1.0)
    i, d = cs.nearest(np.array([[0.5, 0.4], [2.0, 0.0]]))
    assert i.tolist() == [0, 1] and np.allclose(d, [0.9, 1.0])
    assert cs.contains(np.array([[0.5, 0.5], [1.5, 0.0]])).tolist() == [True, False]
    assert cs.contains(np.array([1.5, 0.0]), scale=2.0)
    assert cs.within(np.array([1.5, 0.0]), 1.5) == [0, 1]
    with pytest.raises(ValueError):
        CoveredSpace(np.zeros((1, 2)), 0.0)


def test_build_lsr_with_oracle(small_ds, oracle, graph):
    rm = roadmap.build_lsr(oracle, small_ds, eps=0.5)
    # exact embedding: one node per distinct state, every edge is a true transition
    assert rm.n_nodes == len(np.unique(small_ds.labels))
    assert all(len(set(small_ds.labels[m])) == 1 for m in rm.members)
    for (i, j), e in rm.edges.items():
        assert graph.is_valid_transition(int(rm.labels[i]), e.action, int(rm.labels[j]))
    assert sum(e.count for e in rm.edges.values()) == int(small_ds.a.sum())
    i, j = min(rm.edges)
    start, goal = small_ds.observations[rm.members[i][0]], small_ds.observations[rm.members[j][0]]
    out = roadmap.plan(rm, oracle, start, goal, with_images=True)
    assert out[0].nodes == [i, j] and out[0].actions == [rm.edges[(i, j)].action]
    assert out[0].images.shape[0] == 2 and out[0].start_snap == 0


def test_snap_action_ties():
    table = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    assert roadmap.snap_action([0.5, 0.5], table) == 0
    assert roadmap.snap_action([0.9, 0.9], table) == 1


def test_pack_and_json(small_ds, oracle, tmp_path):
    rm = roadmap.build_lsr(oracle, small_ds, eps=0.5)
    rm = rm.add_shortcut(*next((i, j) for i in range(rm.n_nodes) for j in range(rm.n_nodes)
                               if i != j and (i, j) not in rm.edges), 4)
    datastore.save(rm, tmp_path / "rm.acepack")
    back = datastore.load(tmp_path / "rm.acepack")
    assert back.version == rm.version
    assert np.array_equal(back.reps, rm.reps)
    assert sorted(back.edges) == sorted(rm.edges)
    for k in rm.edges:
        assert back.edges[k].action == rm.edges[k].action
        assert back.edges[k].provenance == rm.edges[k].provenance
    assert all(np.array_equal(a, b) for a, b in zip(back.members, rm.members))
    js = rm.to_json()
    assert len(js["nodes"]) == rm.n_nodes and len(js["edges"]) == len(rm.edges)
    rm.save_json(tmp_path / "rm.json")
