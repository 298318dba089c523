# A tour of the box-stacking world: states, actions, renders and what a random
# explorer can expect from it.
#
#   python3 demos/01_box_world.py

import numpy as np

from acelsr import sim

cfg = sim.SimConfig()
states = sim.enumerate_states(cfg)
actions = sim.enumerate_actions(cfg)
print(f"{len(states)} arrangements of {cfg.n_boxes} boxes in {cfg.columns} columns, {len(actions)} grid actions")

# %% a state is a tuple of columns, bottom box first
s = states[100]
print("state 100:", s)
for a in sorted(sim.valid_actions(s)):
    print("  ", a, "->", sim.apply_action(s, a))

# every move can be undone by swapping pick and place
a = min(sim.valid_actions(s))
assert sim.apply_action(sim.apply_action(s, a), a.reverse()) == s

# %% renders: same state, different nuisance (jitter and lighting)
o1, o2 = sim.render(s, cfg, 1), sim.render(s, cfg, 2)
print("image", o1.pixels.shape, "pixel L1 between two renders of one state:",
      round(float(np.abs(o1.pixels - o2.pixels).sum()), 1))
print("read back from pixels:", sim.read_state(o1.pixels, cfg) == s)

# ascii preview of the red channel
small = o1.pixels[::2, ::2, 0]
for row in small:
    print("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row))

# %% the transition graph
g = sim.ground_truth_graph(cfg)
deg = np.array([g.out_degree(i) for i in range(len(g))])
vals, counts = np.unique(deg, return_counts=True)
print("out-degrees:", {int(v): int(c) for v, c in zip(vals, counts)})
print("strongly connected:", g.is_strongly_connected(), " diameter:", int(g.distances.max()))

# %% a random explorer picks one of 48 actions and restarts anywhere on failure
# expected validity, by pushing the state distribution through the chain
n, k = len(g), len(actions)
P = np.zeros((n, n))
for i in range(n):
    for j in g.succ[i].values():
        P[i, j] += 1 / k
    P[i] += (1 - deg[i] / k) / n
p = np.full(n, 1 / n)
valid = []
for _ in range(500):
    valid.append(p @ deg / k)
    p = p @ P
print(f"expected validity over 500 steps: {100 * np.mean(valid):.3f}%")

env = sim.BoxStackEnv(cfg, seed=0)
rng = np.random.default_rng(0)
hits = 0
for _ in range(5000):
    ok = env.step(int(rng.integers(k)))
    hits += ok
    if not ok:
        env.reset()
print(f"simulated over 5000 steps:        {100 * hits / 5000:.3f}%")
