import math

import numpy as np
import pytest

from acelsr import datastore, evaluation as ev, roadmap, sim
from acelsr.ace import ExploreStep
from acelsr.roadmap import Edge, Roadmap


def chain_roadmap(cfg, graph, labels, actions):
    n = len(labels)
    edges = {(k, k + 1): Edge(a, np.zeros(4, np.float32)) for k, a in enumerate(actions)}
    return Roadmap(np.eye(n, dtype=np.float32), [np.array([k]) for k in range(n)], np.array(labels, np.int32),
                   edges, sim.action_coords(cfg), 0.5)


def test_plan_ok_by_hand(cfg, graph):
    s = 0
    u = min(graph.succ[s])
    t = graph.succ[s][u]
    rm = chain_roadmap(cfg, graph, [s, t], [u])
    assert ev.plan_ok(rm, graph, [0, 1], s, t) == (True, 1)
    # valid transition but the wrong goal label
    assert ev.plan_ok(rm, graph, [0, 1], s, s) == (False, 1)
    bad = chain_roadmap(cfg, graph, [s, t], [next(a for a in range(48) if a not in graph.succ[s])])
    assert ev.plan_ok(bad, graph, [0, 1], s, t) == (False, 0)


def test_eval_plans_with_oracle_counts(cfg, graph, oracle, small_ds):
    rm = roadmap.build_lsr(oracle, small_ds, eps=1.0)
    q = datastore.make_queries(cfg, 40, 80, seed=3)
    m = ev.eval_plans(rm, oracle, q, graph)
    assert m.n_queries == 40
    assert 0 <= m.pct_all <= m.pct_any <= 100
    # under the exact embedding every proposed transition is real
    assert m.pct_trans == 100.0
    # a query succeeds exactly when both states are nodes and connected
    nodes = {int(l): k for k, l in enumerate(rm.labels)}
    expect = 0
    for a, b in q.pairs:
        la, lb = int(q.labels[a]), int(q.labels[b])
        if la in nodes and lb in nodes:
            try:
                rm.shortest_paths(nodes[la], nodes[lb])
                expect += 1
            except roadmap.NoPath:
                pass
    assert m.pct_any == pytest.approx(100.0 * expect / 40)
    assert m.pct_all == m.pct_any


def test_missing_labels(cfg, graph, oracle, small_ds):
    rm = chain_roadmap(cfg, graph, [-1, 0], [0])
    with pytest.raises(ev.MissingLabels):
        ev.eval_plans(rm, oracle, datastore.make_queries(cfg, 2, 4), graph)
    with pytest.raises(ev.MissingLabels):
        ev.eval_augment(np.array([[0, -1]]))


def test_small_metrics():
    assert ev.eval_augment(np.array([[1, 1], [2, 3]])) == (2, 50.0)
    n, pct = ev.eval_augment(np.zeros((0, 2), int))
    assert n == 0 and math.isnan(pct)
    log = [ExploreStep(0, frozenset(), [], 1, v) for v in (True, False, True, True)]
    assert ev.eval_explore(log) == 75.0
    assert math.isnan(ev.eval_explore([]))


def test_eval_edges(cfg, graph):
    s = 0
    u = min(graph.succ[s])
    rm = chain_roadmap(cfg, graph, [s, graph.succ[s][u], 5], [u])
    rm = rm.add_shortcut(1, 0, int(sim.reverse_action_index(cfg, u)))
    rm = rm.add_shortcut(0, 2, u)
    assert ev.eval_edges(rm, graph) == (2, 50.0)
    assert ev.eval_edges(rm, graph, "dataset") == (1, 100.0)
