"""Suggestion module: Siamese embedding, density clustering of the embedded
anchors, and nearest-member lookup of the applicable action set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import HDBSCAN

from . import learncore as lc
from .datastore import Dataset, SMDataset, action_anchors


class DegenerateDataset(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


def _pool(x: np.ndarray, image_shape, factor: int) -> np.ndarray:
    """Average-pool flattened ``(N, H*W*C)`` images by ``factor`` in both spatial axes."""
    h, w, c = image_shape
    x = x.reshape(-1, h // factor, factor, w // factor, factor, c)
    return x.mean(axis=(2, 4)).reshape(len(x), -1)


@dataclass
class SMParams:
    net: lc.ModelParams
    image_shape: tuple
    pool: int = 2
    margin: float = 1.0
    trace: list = field(default_factory=list)

    @property
    def sm_dim(self) -> int:
        return self.net.out_width

    def features(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32)
        x = obs.reshape(-1, int(np.prod(self.image_shape)))
        return _pool(x, self.image_shape, self.pool) if self.pool > 1 else x

    def encode(self, obs) -> np.ndarray:
        single = np.ndim(obs) == len(self.image_shape)
        out = lc.predict(self.net, self.features(obs))
        return out[0] if single else out

    def to_pack(self):
        meta, arrays = lc.pack_model("net", self.net)
        return "sm", {"net": meta, "image_shape": list(self.image_shape), "pool": self.pool,
                      "margin": self.margin, "trace": self.trace}, arrays

    @classmethod
    def from_pack(cls, meta, arrays):
        return cls(lc.unpack_model("net", meta["net"], arrays), tuple(meta["image_shape"]), meta["pool"],
                   meta["margin"], meta["trace"])


def contrastive_loss(net, feats, left, right, s, margin):
    """Attract similar pairs, hinge-repel dissimilar ones; L1 embedding distance."""
    uniq, inv = np.unique(np.concatenate([left, right]), return_inverse=True)
    emb, cache = lc.forward(net, feats[uniq])
    n = len(s)
    ea, eb = emb[inv[:n]], emb[inv[n:]]
    d = lc.l1_distance(ea, eb)
    pos = s == 1
    loss = float(np.mean(np.where(pos, lc.attract(d), lc.hinge_repel(d, margin))))
    gd = np.where(pos, lc.attract_grad(d), lc.hinge_repel_grad(d, margin)) / n
    g = lc.l1_distance_grad(ea, eb) * gd[:, None]
    gemb = np.zeros_like(emb)
    np.add.at(gemb, inv[:n], g)
    np.add.at(gemb, inv[n:], -g)
    grads, _ = lc.backward(net, cache, gemb.astype(emb.dtype))
    return loss, grads


def train_sm(sm_ds: SMDataset, cfg: lc.TrainConfig, margin: float = 1.0, sm_dim: int = 12,
             hidden=(128, 128), pool: int = 2) -> SMParams:
    """Siamese training on the rearranged dataset (100 epochs for box stacking)."""
    classes = set(np.unique(sm_ds.s).tolist())
    if classes != {0, 1}:
        raise DegenerateDataset(f"need both similar and dissimilar pairs, got {sorted(classes)}")
    image_shape = sm_ds.obs.shape[1:]
    shell = SMParams(None, tuple(image_shape), pool, margin)
    feats = shell.features(sm_ds.obs)
    net = lc.init_mlp([feats.shape[1], *hidden, sm_dim], cfg.seed)

    def loss_fn(params, batch, rng):
        left, right, s = batch
        loss, grads = contrastive_loss(params[0], feats, left, right, s, margin)
        return loss, [grads]

    net, trace = lc.train(net, (sm_ds.left, sm_ds.right, sm_ds.s), cfg, loss_fn)
    return SMParams(net, tuple(image_shape), pool, margin, trace)


@dataclass
class SuggestionIndex:
    """Embedded anchors with cluster ids and action sets.

    ``member_actions[k]`` are the actions applied from anchor ``k`` in the
    dataset; ``cluster_actions[c]`` is the union over the members of cluster ``c``.
    """

    embeddings: np.ndarray
    cluster: np.ndarray
    member_actions: list
    cluster_actions: list

    def __len__(self):
        return len(self.cluster)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_actions)

    def nearest(self, emb: np.ndarray) -> np.ndarray:
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        ref = self.embeddings.astype(np.float64)
        out = np.empty(len(emb), dtype=np.int64)
        step = max(1, 2**22 // max(ref.size, 1))
        for lo in range(0, len(emb), step):
            d = np.abs(emb[lo:lo + step, None, :] - ref[None]).sum(-1)
            out[lo:lo + step] = np.argmin(d, axis=1)
        return out

    def lookup(self, emb: np.ndarray) -> list[frozenset]:
        return [self.cluster_actions[self.cluster[k]] for k in self.nearest(emb)]

    def to_pack(self):
        pairs = [(k, u) for k, acts in enumerate(self.member_actions) for u in sorted(acts)]
        arrays = {"embeddings": self.embeddings, "cluster": self.cluster,
                  "member_actions": np.array(pairs, dtype=np.int32).reshape(-1, 2)}
        return "sm_index", {"n_members": len(self.member_actions)}, arrays

    @classmethod
    def from_pack(cls, meta, arrays):
        members = [set() for _ in range(meta["n_members"])]
        for k, u in arrays["member_actions"]:
            members[int(k)].add(int(u))
        return _finish_index(arrays["embeddings"], arrays["cluster"].astype(np.int64),
                             [frozenset(m) for m in members])


def _finish_index(emb, cluster, member_actions) -> SuggestionIndex:
    n_clusters = int(cluster.max()) + 1 if len(cluster) else 0
    acts = [set() for _ in range(n_clusters)]
    for c, a in zip(cluster, member_actions):
        acts[c] |= a
    return SuggestionIndex(emb, cluster, member_actions, [frozenset(a) for a in acts])


def cluster_embeddings(emb: np.ndarray, min_cluster_size: int = 2) -> np.ndarray:
    """HDBSCAN under L1; noise points become singleton clusters.

    Final ids are renumbered by first appearance so the result does not depend
    on the clusterer's internal numbering.
    """
    n = len(emb)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n < max(min_cluster_size, 2):
        raw = np.full(n, -1)
    else:
        raw = HDBSCAN(min_cluster_size=min_cluster_size, metric="manhattan", copy=True).fit(
            np.asarray(emb, dtype=np.float64)).labels_
    out = np.empty(n, dtype=np.int64)
    remap: dict[int, int] = {}
    for k, c in enumerate(raw):
        key = int(c) if c >= 0 else -(k + 1)
        if key not in remap:
            remap[key] = len(remap)
        out[k] = remap[key]
    return out


def build_index(embedder, ds: Dataset, min_cluster_size: int = 2) -> SuggestionIndex:
    """Embed every observation that starts an action pair and cluster the embeddings."""
    obs, acts, _ = action_anchors(ds)
    if len(obs) == 0:
        raise EmptyIndex("dataset has no action pairs")
    emb = np.asarray(embedder.encode(obs), dtype=np.float32)
    return _finish_index(emb, cluster_embeddings(emb, min_cluster_size), acts)


def suggest(index: SuggestionIndex, embedder, obs) -> frozenset:
    if len(index) == 0:
        raise EmptyIndex("empty suggestion index")
    return index.lookup(embedder.encode(np.asarray(obs)[None]))[0]


def suggest_many(index: SuggestionIndex, embedder, obs) -> list[frozenset]:
    if len(index) == 0:
        raise EmptyIndex("empty suggestion index")
    return index.lookup(embedder.encode(obs))


@dataclass
class ActionBinTable:
    """Grid binning of continuous (pick_x, pick_y, place_x, place_y) actions in [0, 1]."""

    bin_fraction: float
    keys: list
    means: np.ndarray
    pick_only: bool = False

    @property
    def n_bins_per_axis(self) -> int:
        return max(1, math.ceil(1.0 / self.bin_fraction - 1e-9))

    def bin_key(self, action) -> tuple:
        a = np.asarray(action, dtype=np.float64)
        if self.pick_only:
            a = a[:2]
        k = np.minimum(np.floor(a / self.bin_fraction + 1e-12), self.n_bins_per_axis - 1)
        return tuple(int(v) for v in np.maximum(k, 0))

    def assign(self, actions) -> np.ndarray:
        lookup = {k: i for i, k in enumerate(self.keys)}
        return np.array([lookup.get(self.bin_key(a), -1) for a in np.atleast_2d(actions)], dtype=np.int64)

    def __len__(self):
        return len(self.keys)


def bin_actions(actions, bin_fraction: float, pick_only: bool = False) -> ActionBinTable:
    """Merge actions per (pick bin, place bin) and keep each bin's mean action.

    With ``pick_only`` actions are grouped by their pick bin alone.
    """
    if not 0 < bin_fraction <= 1:
        raise ValueError("bin_fraction must lie in (0, 1]")
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    shell = ActionBinTable(bin_fraction, [], np.zeros((0, actions.shape[1])), pick_only)
    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(actions):
        groups.setdefault(shell.bin_key(a), []).append(i)
    keys = sorted(groups)
    means = np.array([actions[groups[k]].mean(axis=0) for k in keys]).reshape(len(keys), actions.shape[1])
    return ActionBinTable(bin_fraction, keys, means, pick_only)
