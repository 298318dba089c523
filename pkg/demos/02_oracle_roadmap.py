# Roadmaps with a perfect embedding. When every state gets its own one-hot code
# the roadmap is the transition graph itself, which makes a good sanity check
# for clustering, edge building and shortest-path planning.
#
#   python3 demos/02_oracle_roadmap.py

import numpy as np

from acelsr import datastore, roadmap, sim

cfg = sim.SimConfig()
g = sim.ground_truth_graph(cfg)
oracle = sim.StateIndicatorEncoder(cfg)

# %% a small random dataset covers only part of the graph
ds = datastore.generate_dataset(cfg, 400, 0.2, seed=0)
rm = roadmap.build_lsr(oracle, ds, eps=1.0)
print(f"400 tuples -> {rm.n_nodes} nodes, {len(rm.edges)} edges (graph has {len(g)} states)")

# %% many node pairs are disconnected with this little data
def hops_from(i):
    dist, frontier = {i: 0}, [i]
    while frontier:
        nxt = []
        for a in frontier:
            for b in rm.adjacency[a]:
                if b not in dist:
                    dist[b] = dist[a] + 1
                    nxt.append(b)
        frontier = nxt
    return dist


reach = [hops_from(i) for i in range(rm.n_nodes)]
src = int(np.argmax([len(r) for r in reach]))
dst = max(reach[src], key=reach[src].get)
print(f"node {src} reaches {len(reach[src])} of {rm.n_nodes} nodes; "
      f"planning to node {dst} ({reach[src][dst]} hops)")

# check each plan step against the simulator
for p in roadmap.plans_between(rm, src, dst, max_paths=3):
    state = g.states[rm.labels[p.nodes[0]]]
    for u in p.actions:
        state = sim.apply_action(state, g.actions[u])
    print("plan", p.nodes, "reaches goal:", g.index[state] == rm.labels[p.nodes[-1]])

# %% one tuple per transition: now every hop count matches breadth-first search
rows = [(s, u, t) for s in range(len(g)) for u, t in sorted(g.succ[s].items())]
oa = np.stack([sim.render(g.states[s], cfg, 2 * k).pixels for k, (s, _, _) in enumerate(rows)])
ob = np.stack([sim.render(g.states[t], cfg, 2 * k + 1).pixels for k, (_, _, t) in enumerate(rows)])
full = datastore.Dataset(oa, ob, np.ones(len(rows)), [r[1] for r in rows], [r[0] for r in rows],
                         [r[2] for r in rows], sim.action_coords(cfg))
rm = roadmap.build_lsr(oracle, full, eps=1.0)
q = datastore.make_queries(cfg, 200, 400, seed=3)
bad = 0
for a, b in q.pairs:
    p = roadmap.plan(rm, oracle, q.obs[a], q.obs[b], max_paths=1)[0]
    bad += len(p.actions) != g.distances[q.labels[a], q.labels[b]]
print(f"{len(rows)} transitions -> {rm.n_nodes} nodes; 200 queries, {bad} hop-count mismatches")
