# Augment, connect and explore on a scarce dataset, compared with the plain
# roadmap built from the same data. One seed on 1250 training tuples; takes a
# few minutes on one core.
#
#   python3 demos/03_ace_vs_plain.py

import numpy as np

from acelsr import ace, datastore, evaluation as ev, experiment as ex, mapping, sim

xcfg = ex.ExperimentConfig()
cfg = xcfg.sim_config()
graph = sim.ground_truth_graph(cfg)

full = datastore.generate_dataset(cfg, xcfg.n_pairs, xcfg.similar_fraction, seed=0)
ds = datastore.subsample(full, 0.5, seed=0)
queries = datastore.make_queries(cfg, 500, xcfg.holdout_size, seed=1)
print(f"training tuples: {len(ds)} (action, similar) = {ds.counts}")

# %% stage-1 models are shared by both pipelines
plain_cfg = xcfg.pipeline("eps-lsr", seed=0)
ace_cfg = xcfg.pipeline("ace-lsr", seed=0)
models = ace.train_models(ds, ace_cfg)
stats = mapping.latent_stats(models.mm, ds)
print(f"similar-pair latent distance: mu0={stats.mu0:.3f} sigma0={stats.sigma0:.3f}")

env_factory = lambda s: sim.BoxStackEnv(cfg, s)
reverse = lambda a: sim.reverse_action_index(cfg, a)
plain = ace.prepare(ds, env_factory, plain_cfg, initial=(models, stats))
boosted = ace.prepare(ds, env_factory, ace_cfg, reverse, initial=(models, stats))

for stage in boosted.provenance:
    print("  ", stage)
print(f"augment: {boosted.augment.n_new} new similar pairs, "
      f"{ev.eval_augment(boosted.augment.labels)[1]:.1f}% of them truly similar")
print(f"explore: {ev.eval_explore(boosted.explore_log):.1f}% of {len(boosted.explore_log)} actions valid")

# %% score both roadmaps over the w grid (no validation split here, so this is an upper envelope)
print(" w_eps   plain % any   ACE % any")
for w in xcfg.w_grid:
    row = []
    for state, pc in ((plain, plain_cfg), (boosted, ace_cfg)):
        rm, _ = ace.finalize(state, pc, float(w))
        row.append(ev.eval_plans(rm, state.models.mm, queries, graph).pct_any)
    print(f"{w:6.2f}   {row[0]:10.1f}   {row[1]:9.1f}")

rm, prov = ace.finalize(boosted, ace_cfg, -0.05)
n, pct = ev.eval_edges(rm, graph)
print(f"connect at w=-0.05: {n} shortcut edges, {pct:.1f}% valid")
