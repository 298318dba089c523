"""Covered subspace, DBSCAN clustering and the latent space roadmap."""
from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .datastore import Dataset


class NoPath(RuntimeError):
    pass


class UnknownNode(KeyError):
    pass


class CoveredSpace:
    """Encoded training observations with an L1 KD-tree.

    ``contains(z)`` is membership in the union of closed L1 balls of radius ``eps``.
    """

    def __init__(self, points: np.ndarray, eps: float):
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.points = np.asarray(points, dtype=np.float64)
        self.eps = float(eps)
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def nearest(self, z: np.ndarray) -> tuple:
        """Index and L1 distance of the closest covered state (vectorized over rows)."""
        z = np.asarray(z, dtype=np.float64)
        d, i = self.tree.query(z, k=1, p=1)
        return i, d

    def contains(self, z: np.ndarray, scale: float = 1.0):
        _, d = self.nearest(z)
        return d <= self.eps * scale

    def within(self, z: np.ndarray, r: float) -> list[int]:
        return sorted(self.tree.query_ball_point(np.asarray(z, dtype=np.float64), r, p=1))


def build_covered(encoder, ds: Dataset, eps: float) -> CoveredSpace:
    return CoveredSpace(encoder.encode(ds.observations), eps)


def dbscan(points: np.ndarray, eps: float, min_samples: int = 1) -> np.ndarray:
    """DBSCAN under the L1 metric; noise is labeled -1.

    Clusters are numbered in order of their lowest-index core point, which
    makes the labeling deterministic.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    neigh = tree.query_ball_point(pts, eps, p=1)
    core = np.array([len(nb) >= min_samples for nb in neigh])
    cluster = 0
    for i in range(n):
        if labels[i] >= 0 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neigh[p]:
                if labels[q] < 0:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


@dataclass
class Edge:
    action: int
    coords: np.ndarray
    count: int = 1
    provenance: str = "dataset"


@dataclass
class Plan:
    nodes: list[int]
    actions: list[int]
    latents: np.ndarray
    start_snap: float = 0.0
    goal_snap: float = 0.0
    images: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.actions)


@dataclass
class Roadmap:
    """Directed graph over clusters of covered states.

    ``members[i]`` lists covered-state indices (rows of ``ds.observations``) of
    node ``i``; ``labels[i]`` is the majority oracle label (-1 if unavailable).
    """

    reps: np.ndarray
    members: list[np.ndarray]
    labels: np.ndarray
    edges: dict[tuple[int, int], Edge]
    actions: np.ndarray
    eps: float
    assignment: np.ndarray = field(default=None)
    version: int = 0

    def __post_init__(self):
        self._adj = None

    @property
    def n_nodes(self) -> int:
        return len(self.reps)

    @property
    def adjacency(self) -> list[list[int]]:
        if self._adj is None:
            adj = [[] for _ in range(self.n_nodes)]
            for (i, j) in self.edges:
                adj[i].append(j)
            self._adj = [sorted(a) for a in adj]
        return self._adj

    def snap(self, z: np.ndarray):
        """Nearest node (L1 to representative) for each row of ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        reps = self.reps.astype(np.float64)
        idx = np.empty(len(z), dtype=np.int64)
        dist = np.empty(len(z))
        step = max(1, 2**22 // max(reps.size, 1))
        for lo in range(0, len(z), step):
            d = np.abs(z[lo:lo + step, None, :] - reps[None]).sum(-1)
            idx[lo:lo + step] = np.argmin(d, axis=1)
            dist[lo:lo + step] = d[np.arange(len(d)), idx[lo:lo + step]]
        return idx, dist

    def shortest_paths(self, src: int, dst: int, max_paths: int = 10) -> list[list[int]]:
        """All minimum-hop node paths ``src -> dst`` (up to ``max_paths``), lexicographic by node id."""
        if src == dst:
            return [[src]]
        adj = self.adjacency
        dist = {src: 0}
        queue = deque([src])
        while queue and dst not in dist:
            i = queue.popleft()
            for j in adj[i]:
                if j not in dist:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        if dst not in dist:
            raise NoPath(f"node {dst} unreachable from {src}")
        # nodes that can still reach dst on a shortest path, via reverse BFS restricted to layers
        depth = dist[dst]
        radj: dict[int, list[int]] = {}
        for (i, j) in self.edges:
            if i in dist and j in dist and dist[j] == dist[i] + 1 and dist[j] <= depth:
                radj.setdefault(j, []).append(i)
        useful = {dst}
        queue = deque([dst])
        while queue:
            j = queue.popleft()
            for i in radj.get(j, ()):
                if i not in useful:
                    useful.add(i)
                    queue.append(i)
        paths: list[list[int]] = []

        def walk(path):
            if len(paths) >= max_paths:
                return
            i = path[-1]
            if i == dst:
                paths.append(list(path))
                return
            for j in adj[i]:
                if j in useful and dist.get(j) == dist[i] + 1:
                    path.append(j)
                    walk(path)
                    path.pop()

        walk([src])
        return paths

    def add_shortcut(self, i: int, j: int, u: int) -> "Roadmap":
        return add_shortcut(self, i, j, u)

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "nodes": [{"id": i, "label": int(self.labels[i]), "size": int(len(m)), "rep": self.reps[i].tolist()}
                      for i, m in enumerate(self.members)],
            "edges": [{"from": i, "to": j, "action": e.action, "coords": np.asarray(e.coords).tolist(),
                       "count": e.count, "provenance": e.provenance} for (i, j), e in sorted(self.edges.items())],
        }

    def to_pack(self):
        keys = sorted(self.edges)
        sizes = np.array([len(m) for m in self.members], dtype=np.int32)
        members = np.concatenate(self.members) if self.members else np.zeros(0, np.int32)
        arrays = {
            "reps": self.reps, "labels": self.labels, "member_sizes": sizes, "members": members,
            "edge_ij": np.array(keys, dtype=np.int32).reshape(-1, 2),
            "edge_action": np.array([self.edges[k].action for k in keys], dtype=np.int32),
            "edge_count": np.array([self.edges[k].count for k in keys], dtype=np.int32),
            "edge_coords": np.array([self.edges[k].coords for k in keys], dtype=np.float32).reshape(len(keys), -1),
            "edge_shortcut": np.array([self.edges[k].provenance == "shortcut" for k in keys], dtype=np.int32),
            "actions": self.actions,
        }
        if self.assignment is not None:
            arrays["assignment"] = self.assignment
        return "roadmap", {"eps": self.eps, "version": self.version}, arrays

    @classmethod
    def from_pack(cls, meta, arrays):
        sizes = arrays["member_sizes"]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        members = [arrays["members"][bounds[k]:bounds[k + 1]].astype(np.int64) for k in range(len(sizes))]
        edges = {}
        for k, (i, j) in enumerate(arrays["edge_ij"]):
            edges[(int(i), int(j))] = Edge(int(arrays["edge_action"][k]), arrays["edge_coords"][k],
                                           int(arrays["edge_count"][k]),
                                           "shortcut" if arrays["edge_shortcut"][k] else "dataset")
        assignment = arrays.get("assignment")
        return cls(arrays["reps"], members, arrays["labels"], edges,
                   arrays["actions"].astype(np.float64), meta["eps"],
                   None if assignment is None else assignment.astype(np.int64), meta.get("version", 0))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def snap_action(coords: np.ndarray, table: np.ndarray) -> int:
    """Index of the table row closest (L1) to ``coords``; ties go to the lowest index."""
    return int(np.argmin(np.abs(table - np.asarray(coords)).sum(axis=1)))


def build_lsr(encoder, ds: Dataset, eps: float, latents: Optional[np.ndarray] = None) -> Roadmap:
    """Cluster all encoded observations (DBSCAN, radius ``eps``, min_samples=1) and
    connect clusters along the dataset's action pairs with averaged actions."""
    z = encoder.encode(ds.observations) if latents is None else np.asarray(latents)
    z = np.asarray(z, dtype=np.float64)
    assign = dbscan(z, eps, min_samples=1)
    n_nodes = int(assign.max()) + 1 if len(assign) else 0
    members = [np.flatnonzero(assign == k) for k in range(n_nodes)]
    # stored at 32-bit so persisted roadmaps round-trip exactly
    reps = np.array([z[m].mean(axis=0) for m in members], dtype=np.float32).reshape(n_nodes, z.shape[1])
    all_labels = ds.labels
    labels = np.full(n_nodes, -1, dtype=np.int32)
    for k, m in enumerate(members):
        known = [int(x) for x in all_labels[m] if x >= 0]
        if known:
            # most common, ties to the smallest label
            cnt = Counter(known)
            top = max(cnt.values())
            labels[k] = min(lab for lab, c in cnt.items() if c == top)
    q = len(ds)
    sums: dict[tuple[int, int], list] = {}
    for r in np.flatnonzero(ds.a == 1):
        i, j = int(assign[r]), int(assign[q + r])
        if i == j:
            continue
        acc = sums.setdefault((i, j), [np.zeros(ds.actions.shape[1]), 0])
        acc[0] = acc[0] + ds.actions[ds.u[r]]
        acc[1] += 1
    edges = {}
    for key, (s, c) in sorted(sums.items()):
        mean = (s / c).astype(np.float32)
        edges[key] = Edge(snap_action(mean, ds.actions), mean, c, "dataset")
    return Roadmap(reps, members, labels, edges, np.asarray(ds.actions, dtype=np.float64), float(eps), assign)


def plan(rm: Roadmap, encoder, start: np.ndarray, goal: np.ndarray, max_paths: int = 10,
         with_images: bool = False) -> list[Plan]:
    """Encode start/goal, snap to the nearest nodes and return all shortest plans."""
    zs, zg = encoder.encode(np.stack([np.asarray(start), np.asarray(goal)]))
    (s, g), (ds_, dg) = rm.snap(np.stack([zs, zg]))
    return plans_between(rm, int(s), int(g), max_paths, float(ds_), float(dg),
                         encoder if with_images else None)


def plans_between(rm: Roadmap, s: int, g: int, max_paths: int = 10, start_snap: float = 0.0,
                  goal_snap: float = 0.0, decoder=None) -> list[Plan]:
    out = []
    for path in rm.shortest_paths(s, g, max_paths):
        acts = [rm.edges[(a, b)].action for a, b in zip(path[:-1], path[1:])]
        lat = rm.reps[path]
        imgs = decoder.decode(lat) if decoder is not None else None
        out.append(Plan(path, acts, lat, start_snap, goal_snap, imgs))
    return out


def add_shortcut(rm: Roadmap, i: int, j: int, u: int) -> Roadmap:
    """New roadmap version with edge ``i -> j`` labeled ``u``; existing edges are kept as they are."""
    if not (0 <= i < rm.n_nodes) or not (0 <= j < rm.n_nodes):
        raise UnknownNode((i, j))
    if i == j:
        raise ValueError("self-edges are not allowed")
    if (i, j) in rm.edges:
        return rm
    edges = dict(rm.edges)
    edges[(i, j)] = Edge(int(u), rm.actions[int(u)].astype(np.float32), 1, "shortcut")
    return replace(rm, edges=edges, version=rm.version + 1)


def with_shortcuts(rm: Roadmap, shortcuts) -> tuple[Roadmap, int]:
    """Add many ``(i, j, u)`` shortcuts at once; returns the new roadmap and how many were new."""
    edges = dict(rm.edges)
    added = 0
    for i, j, u in shortcuts:
        if not (0 <= i < rm.n_nodes) or not (0 <= j < rm.n_nodes):
            raise UnknownNode((i, j))
        if i == j:
            raise ValueError("self-edges are not allowed")
        if (i, j) not in edges:
            edges[(i, j)] = Edge(int(u), rm.actions[int(u)].astype(np.float32), 1, "shortcut")
            added += 1
    return replace(rm, edges=edges, version=rm.version + 1), added
