"""Augment, Connect and Explore procedures, the integration pipeline and the
two baselines (nearest-neighbour augmentation, random exploration).
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import learncore as lc
from . import mapping, sim
from .datastore import Dataset, build_sm_dataset
from .lpm import train_lpm
from .roadmap import CoveredSpace, Roadmap, build_lsr, with_shortcuts
from .suggestion import build_index, suggest_many, train_sm


class NoCandidateActions(RuntimeError):
    pass


@dataclass(frozen=True)
class AceConfig:
    r: float
    eps: float
    n_explore: int = 500
    sort_order: str = "descending"
    rho_gate: float = 1.0

    def __post_init__(self):
        if self.r <= 0 or self.eps <= 0 or self.n_explore < 0:
            raise ValueError("need r > 0, eps > 0, n_explore >= 0")
        if self.sort_order not in ("descending", "ascending"):
            raise ValueError(f"unknown sort order {self.sort_order!r}")


@dataclass
class Models:
    """The three learned components plus the suggestion index built on the current data."""

    mm: object
    lpm: object
    sm: object
    sm_index: object


@dataclass
class AugmentResult:
    dataset: Dataset
    pairs: np.ndarray
    labels: np.ndarray

    @property
    def n_new(self) -> int:
        return len(self.pairs)


def _new_similar(ds: Dataset, pairs: np.ndarray) -> Dataset:
    obs, labels = ds.observations, ds.labels
    n = len(pairs)
    i, j = (pairs[:, 0], pairs[:, 1]) if n else (np.zeros(0, int), np.zeros(0, int))
    return Dataset(obs[i], obs[j], np.zeros(n), np.full(n, -1), labels[i], labels[j], ds.actions, {})


def _digests(obs: np.ndarray) -> list[bytes]:
    return [hashlib.blake2b(o.tobytes(), digest_size=16).digest() for o in obs]


def _pair_key(h: list, i: int, j: int) -> tuple:
    return (h[i], h[j]) if h[i] <= h[j] else (h[j], h[i])


def _existing_similar(ds: Dataset, h: Optional[list] = None) -> set:
    """Unordered content keys of the similar pairs in ``ds`` (robust to re-indexing after appends)."""
    h = _digests(ds.observations) if h is None else h
    q = len(ds)
    return {_pair_key(h, int(r), int(q + r)) for r in np.flatnonzero(ds.a == 0)}


def lpmr_signatures(z: np.ndarray, suggested: list, lpm, covered: CoveredSpace, rho_gate: float = 1.0):
    """For each covered state: the actions with a reliable prediction and the sorted
    ids of the covered states nearest to those predictions."""
    rows = [(i, u) for i, acts in enumerate(suggested) for u in sorted(acts)]
    sig_actions = [[] for _ in suggested]
    sig_ids = [[] for _ in suggested]
    if rows:
        idx = np.array([r[0] for r in rows])
        us = np.array([r[1] for r in rows])
        pred = lpm.predict(z[idx], us)
        near, dist = covered.nearest(pred)
        ok = dist <= covered.eps * rho_gate
        for (i, u), n, good in zip(rows, near, ok):
            if good:
                sig_actions[i].append(u)
                sig_ids[i].append(int(n))
    return [tuple(a) for a in sig_actions], [tuple(sorted(s)) for s in sig_ids]


def augment(ds: Dataset, mm, sm, sm_index, lpm, covered: CoveredSpace, cfg: AceConfig) -> AugmentResult:
    """New similar pairs between covered states with equal suggested action sets
    whose reliable predictions land on the same covered states.

    For each covered state the candidates within radius ``r`` are scanned in
    ``cfg.sort_order`` of distance and at most one pair is emitted. Pairs
    already present, and mirror images of emitted pairs, are skipped.
    """
    obs = ds.observations
    z = covered.points
    suggested = suggest_many(sm_index, sm, obs) if len(obs) else []
    sig_a, sig_n = lpmr_signatures(z, suggested, lpm, covered, cfg.rho_gate)
    h = _digests(obs)
    known = _existing_similar(ds, h)
    emitted: set = set()
    pairs = []
    for i in range(len(z)):
        if not sig_n[i]:
            continue
        cand = [j for j in covered.within(z[i], cfg.r) if j != i]
        if not cand:
            continue
        d = np.abs(z[cand] - z[i]).sum(axis=1)
        order = np.lexsort((cand, -d if cfg.sort_order == "descending" else d))
        for k in order:
            j = cand[k]
            if suggested[j] != suggested[i] or sig_a[j] != sig_a[i] or sig_n[j] != sig_n[i]:
                continue
            key = _pair_key(h, i, j)
            if key not in known and key not in emitted:
                emitted.add(key)
                pairs.append((i, j))
            break
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    new = _new_similar(ds, pairs)
    out = ds.append(new, **{**ds.provenance, "augmented": int(len(pairs))})
    return AugmentResult(out, pairs, np.stack([ds.labels[pairs[:, 0]], ds.labels[pairs[:, 1]]], 1))


def augment_baseline(ds: Dataset, encoder, radius: float, latents: Optional[np.ndarray] = None) -> AugmentResult:
    """Pair every covered state with its nearest neighbour showing a different
    observation, if it lies within ``radius``."""
    if len(ds) == 0:
        return AugmentResult(ds, np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int32))
    obs = ds.observations
    z = np.asarray(encoder.encode(obs) if latents is None else latents, dtype=np.float64)
    cov = CoveredSpace(z, max(radius, 1e-12))
    keys = _digests(obs)
    known = _existing_similar(ds, keys)
    emitted: set = set()
    pairs = []
    for i in range(len(z)):
        best = None
        for j in cov.within(z[i], radius):
            if j == i or keys[j] == keys[i]:
                continue
            d = np.abs(z[j] - z[i]).sum()
            if best is None or d < best[0]:
                best = (d, j)
        if best is None:
            continue
        key = _pair_key(keys, i, best[1])
        if key not in known and key not in emitted:
            emitted.add(key)
            pairs.append((min(i, best[1]), max(i, best[1])))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    out = ds.append(_new_similar(ds, pairs), **{**ds.provenance, "augmented_baseline": int(len(pairs))})
    return AugmentResult(out, pairs, np.stack([ds.labels[pairs[:, 0]], ds.labels[pairs[:, 1]]], 1))


def connect(rm: Roadmap, mm, sm, sm_index, lpm, eps: float, rho_gate: float = 1.0) -> tuple[Roadmap, list]:
    """Shortcut edges from each node along its suggested actions whose predicted
    successor lies within ``eps * rho_gate`` of another node."""
    if rm.n_nodes == 0:
        return rm, []
    images = mm.decode(rm.reps)
    suggested = suggest_many(sm_index, sm, images)
    rows = [(i, u) for i, acts in enumerate(suggested) for u in sorted(acts)]
    if not rows:
        return rm, []
    idx = np.array([r[0] for r in rows])
    us = np.array([r[1] for r in rows])
    pred = np.asarray(lpm.predict(rm.reps[idx], us), dtype=np.float64)
    reps = rm.reps.astype(np.float64)
    found = []
    step = max(1, 2**22 // max(reps.size, 1))
    for lo in range(0, len(pred), step):
        d = np.abs(pred[lo:lo + step, None, :] - reps[None]).sum(-1)
        d[np.arange(len(d)), idx[lo:lo + step]] = np.inf
        j = np.argmin(d, axis=1)
        dj = d[np.arange(len(d)), j]
        for k in np.flatnonzero(dj < eps * rho_gate):
            found.append((int(idx[lo + k]), int(j[k]), int(us[lo + k])))
    new_rm, _ = with_shortcuts(rm, found)
    added = [(i, j, u) for (i, j, u) in found if rm.edges.get((i, j)) is None]
    seen, unique = set(), []
    for i, j, u in added:
        if (i, j) not in seen:
            seen.add((i, j))
            unique.append((i, j, u))
    return new_rm, unique


@dataclass
class ExploreStep:
    label: int
    suggested: frozenset
    candidates: list
    chosen: int
    valid: bool


def explore_step(covered_z: np.ndarray, obs: np.ndarray, mm, sm, sm_index, lpm,
                 last_action: Optional[int] = None,
                 reverse: Optional[Callable[[int], Optional[int]]] = None) -> tuple[int, list, frozenset]:
    """Pick the suggested action whose predicted successor is farthest from every covered state.

    The reverse of ``last_action`` is removed first when ``reverse`` is given.
    Ties go to the lowest action index. Returns ``(action, [(u, d), ...], suggested)``.
    """
    suggested = suggest_many(sm_index, sm, np.asarray(obs)[None])[0]
    banned = reverse(last_action) if (reverse is not None and last_action is not None) else None
    cand = sorted(u for u in suggested if u != banned)
    if not cand:
        raise NoCandidateActions(f"no candidates left from {sorted(suggested)}")
    zi = np.asarray(mm.encode(np.asarray(obs)[None]))[0]
    pred = np.asarray(lpm.predict(zi, np.array(cand)), dtype=np.float64).reshape(len(cand), -1)
    cz = np.asarray(covered_z, dtype=np.float64)
    d = np.array([np.abs(cz - p).sum(axis=1).min() for p in pred]) if len(cz) else np.full(len(cand), np.inf)
    best = int(np.argmax(d))  # first maximum == lowest action index
    return cand[best], list(zip(cand, d.tolist())), suggested


def _pairs_dataset(template: Dataset, rows) -> Dataset:
    if not rows:
        return Dataset.empty_like(template)
    oa, ob, u, la, lb = zip(*rows)
    n = len(rows)
    return Dataset(np.stack(oa), np.stack(ob), np.ones(n), np.array(u), np.array(la), np.array(lb),
                   template.actions, {})


def run_exploration(env: sim.BoxStackEnv, ds: Dataset, models: Models, n_e: int,
                    reverse: Optional[Callable[[int], Optional[int]]] = None,
                    covered_z: Optional[np.ndarray] = None) -> tuple[Dataset, list[ExploreStep]]:
    """Targeted exploration for ``n_e`` steps; returns the new action pairs and the log.

    Covered states grow with every executed step. Invalid actions reset the
    environment to a random state.
    """
    mm, lpm, sm, index = models.mm, models.lpm, models.sm, models.sm_index
    cz = [np.asarray(mm.encode(ds.observations) if covered_z is None else covered_z, dtype=np.float64)]
    cz_all = np.concatenate(cz) if len(cz[0]) else np.zeros((0, 1))
    rows, log = [], []
    obs = env.observe()
    last = None
    for _ in range(n_e):
        try:
            u, cand, suggested = explore_step(cz_all, obs.pixels, mm, sm, index, lpm, last, reverse)
        except NoCandidateActions:
            u, cand, suggested = explore_step(cz_all, obs.pixels, mm, sm, index, lpm, None, None)
        ok = env.step(u)
        log.append(ExploreStep(obs.meta_label if obs.meta_label is not None else -1, suggested, cand, u, ok))
        if ok:
            nxt = env.observe()
            rows.append((obs.pixels, nxt.pixels, u, obs.meta_label, nxt.meta_label))
            new_z = np.asarray(mm.encode(np.stack([obs.pixels, nxt.pixels])), dtype=np.float64)
            cz_all = np.concatenate([cz_all, new_z]) if len(cz_all) else new_z
            obs, last = nxt, u
        else:
            env.reset()
            obs, last = env.observe(), None
    return _pairs_dataset(ds, rows), log


def explore_baseline(env: sim.BoxStackEnv, n_e: int, seed: int, template: Dataset) -> tuple[Dataset, list[ExploreStep]]:
    """Uniformly random actions from the full table; reset on invalid."""
    rng = np.random.default_rng([seed, 11])
    rows, log = [], []
    obs = env.observe()
    actions = template.actions
    everything = frozenset(range(len(actions)))
    for _ in range(n_e):
        u = int(rng.integers(len(actions)))
        ok = env.step(u)
        log.append(ExploreStep(obs.meta_label, everything, [], u, ok))
        if ok:
            nxt = env.observe()
            rows.append((obs.pixels, nxt.pixels, u, obs.meta_label, nxt.meta_label))
            obs = nxt
        else:
            env.reset()
            obs = env.observe()
    return _pairs_dataset(template, rows), log


# --- integration -------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Everything the integration pipeline needs; ablations switch stages off.

    ``augment`` is ``"ace"``, ``"baseline"`` or ``None``; ``explore`` is ``"ace"``,
    ``"random"`` or ``None``. ``w_eps`` fixes epsilon for every stage.
    """

    mm_train: lc.TrainConfig = lc.TrainConfig(epochs=30, batch_size=64, seed=0)
    mm_weights: mapping.MMWeights = mapping.MMWeights()
    latent_dim: int = 16
    lpm_train: lc.TrainConfig = lc.TrainConfig(epochs=200, batch_size=64, seed=0)
    sm_train: lc.TrainConfig = lc.TrainConfig(epochs=100, batch_size=128, seed=0)
    sm_dim: int = 12
    sm_margin: float = 1.0
    sm_max_partners: int = 4
    min_cluster_size: int = 2
    w_eps: float = -0.25
    n_explore: int = 500
    sort_order: str = "descending"
    rho_gate: float = 1.0
    augment: Optional[str] = "ace"
    explore: Optional[str] = "ace"
    connect: bool = True
    seed: int = 0

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, mm_train=replace(self.mm_train, seed=seed),
                       lpm_train=replace(self.lpm_train, seed=seed), sm_train=replace(self.sm_train, seed=seed))

    def as_dict(self) -> dict:
        return asdict(self)


def train_models(ds: Dataset, cfg: PipelineConfig, need=("mm", "lpm", "sm"), sm_cache: Optional[dict] = None) -> Models:
    """Train the requested models from scratch on ``ds``.

    The suggestion module depends only on the action pairs, so a cached model is
    reused when they are unchanged.
    """
    mm = mapping.train_mm(ds, cfg.mm_train, cfg.mm_weights, cfg.latent_dim) if "mm" in need else None
    lpm = train_lpm(ds, mm, cfg.lpm_train) if "lpm" in need else None
    sm = index = None
    if "sm" in need:
        key = _action_fingerprint(ds)
        if sm_cache is not None and key in sm_cache:
            sm = sm_cache[key]
        else:
            sm_ds = build_sm_dataset(ds, cfg.sm_max_partners, cfg.sm_max_partners, cfg.seed)
            sm = train_sm(sm_ds, cfg.sm_train, cfg.sm_margin, cfg.sm_dim)
            if sm_cache is not None:
                sm_cache[key] = sm
        index = build_index(sm, ds, cfg.min_cluster_size)
    return Models(mm, lpm, sm, index)


def _action_fingerprint(ds: Dataset) -> str:
    return ds.take(np.flatnonzero(ds.a == 1)).fingerprint()


@dataclass
class PipelineState:
    """Data and models after augmentation and exploration, before the roadmap is built."""

    dataset: Dataset
    models: Models
    stats: mapping.LatentStats
    provenance: list = field(default_factory=list)
    augment: Optional[AugmentResult] = None
    explore_log: list = field(default_factory=list)
    initial_models: Optional[Models] = None
    initial_stats: Optional[mapping.LatentStats] = None


def _stage(prov: list, name: str, t0: float, **info):
    prov.append({"stage": name, "seconds": round(time.time() - t0, 3), **info})


def prepare(ds: Dataset, env_factory: Callable[[int], sim.BoxStackEnv], cfg: PipelineConfig,
            reverse: Optional[Callable[[int], Optional[int]]] = None,
            initial: Optional[tuple[Models, mapping.LatentStats]] = None,
            sm_cache: Optional[dict] = None) -> PipelineState:
    """Integration steps up to (and including) exploration: build models, augment,
    update models, explore. ``initial`` lets callers reuse already trained
    first-round models."""
    prov: list = []
    t0 = time.time()
    need = ["mm"]
    if cfg.augment == "ace" or cfg.explore == "ace" or cfg.connect:
        need += ["lpm", "sm"]
    if initial is None:
        models = train_models(ds, cfg, need, sm_cache)
        stats = mapping.latent_stats(models.mm, ds)
    else:
        models, stats = initial
    _stage(prov, "build_models", t0, models=need, mu0=stats.mu0, sigma0=stats.sigma0)
    first_models, first_stats = models, stats
    aug = None
    data = ds
    if cfg.augment:
        t0 = time.time()
        z = np.asarray(models.mm.encode(ds.observations), dtype=np.float64)
        if cfg.augment == "ace":
            eps = mapping.epsilon(stats, cfg.w_eps)
            acfg = AceConfig(r=max(stats.mu0, 1e-9), eps=eps, n_explore=cfg.n_explore,
                             sort_order=cfg.sort_order, rho_gate=cfg.rho_gate)
            aug = augment(ds, models.mm, models.sm, models.sm_index, models.lpm, CoveredSpace(z, eps), acfg)
        else:
            aug = augment_baseline(ds, models.mm, stats.mu0, latents=z)
        data = aug.dataset
        _stage(prov, "augment", t0, method=cfg.augment, r=stats.mu0, new_pairs=aug.n_new)
        t0 = time.time()
        models = train_models(data, cfg, need, sm_cache)
        stats = mapping.latent_stats(models.mm, data)
        _stage(prov, "update_models", t0, mu0=stats.mu0, sigma0=stats.sigma0)
    log: list = []
    if cfg.explore and cfg.n_explore > 0:
        t0 = time.time()
        env = env_factory(cfg.seed)
        if cfg.explore == "ace":
            new, log = run_exploration(env, data, models, cfg.n_explore, reverse)
        else:
            new, log = explore_baseline(env, cfg.n_explore, cfg.seed, data)
        data = data.append(new, **{**data.provenance, "explored": len(new)})
        _stage(prov, "explore", t0, method=cfg.explore, steps=len(log), new_pairs=len(new),
               valid=sum(s.valid for s in log))
    return PipelineState(data, models, stats, prov, aug, log, first_models, first_stats)


def finalize(state: PipelineState, cfg: PipelineConfig, w_eps: Optional[float] = None,
             latents: Optional[np.ndarray] = None) -> tuple[Roadmap, list]:
    """Build the roadmap on the final dataset and (optionally) add shortcuts."""
    w = cfg.w_eps if w_eps is None else w_eps
    eps = mapping.epsilon(state.stats, w)
    t0 = time.time()
    rm = build_lsr(state.models.mm, state.dataset, eps, latents=latents)
    prov = list(state.provenance)
    _stage(prov, "build_lsr", t0, eps=eps, w_eps=w, nodes=rm.n_nodes, edges=len(rm.edges))
    shortcuts: list = []
    if cfg.connect:
        t0 = time.time()
        m = state.models
        rm, shortcuts = connect(rm, m.mm, m.sm, m.sm_index, m.lpm, eps, cfg.rho_gate)
        _stage(prov, "connect", t0, new_edges=len(shortcuts))
    return rm, prov


@dataclass
class IntegrationResult:
    roadmap: Roadmap
    state: PipelineState
    provenance: list


def integrate(ds: Dataset, env_factory: Callable[[int], sim.BoxStackEnv], cfg: PipelineConfig,
              reverse: Optional[Callable[[int], Optional[int]]] = None) -> IntegrationResult:
    """Full pipeline: models, augment, update models, explore, build roadmap, connect.

    The returned dataset (``result.state.dataset``) can seed another round.
    """
    state = prepare(ds, env_factory, cfg, reverse)
    rm, prov = finalize(state, cfg)
    return IntegrationResult(rm, state, prov)
