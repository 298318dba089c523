"""Oracle-based scoring of plans, augmentation pairs, shortcut edges and exploration."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datastore import QuerySet
from .roadmap import NoPath, Roadmap
from .sim import TransitionGraph


class MissingLabels(ValueError):
    pass


@dataclass(frozen=True)
class PlanMetrics:
    pct_trans: float
    pct_all: float
    pct_any: float
    n_queries: int = 0
    n_nopath: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AceMetrics:
    n_pairs: int = 0
    pct_pairs: float = float("nan")
    n_edges: int = 0
    pct_edges: float = float("nan")
    pct_explore: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def _pct(num, den) -> float:
    return 100.0 * num / den if den else float("nan")


def transition_ok(rm: Roadmap, graph: TransitionGraph, i: int, j: int) -> bool:
    return graph.is_valid_transition(int(rm.labels[i]), rm.edges[(i, j)].action, int(rm.labels[j]))


def plan_ok(rm: Roadmap, graph: TransitionGraph, path, start_label: int, goal_label: int) -> tuple[bool, int]:
    """Whether the node path is a correct plan, and how many of its transitions are valid."""
    good = sum(transition_ok(rm, graph, a, b) for a, b in zip(path[:-1], path[1:]))
    ok = (good == len(path) - 1 and rm.labels[path[0]] == start_label and rm.labels[path[-1]] == goal_label)
    return ok, good


def eval_plans(rm: Roadmap, encoder, queries: QuerySet, graph: TransitionGraph, max_paths: int = 10,
               latents: np.ndarray | None = None) -> PlanMetrics:
    """% trans pools transitions over every proposed plan of every query.

    A plan is correct when all its transitions are valid for the node labels
    under the edge actions, and its first/last node labels equal the start/goal
    labels. Queries without a path count as failures and add no transitions.
    """
    if rm.n_nodes == 0 or np.any(rm.labels < 0):
        raise MissingLabels("roadmap nodes need oracle labels")
    used = np.unique(queries.pairs)
    z = np.zeros((len(queries.obs), rm.reps.shape[1]))
    z[used] = encoder.encode(queries.obs[used]) if latents is None else latents[used]
    snapped = np.full(len(queries.obs), -1, dtype=np.int64)
    snapped[used] = rm.snap(z[used])[0]
    n_trans = n_good = n_all = n_any = n_nopath = 0
    cache: dict[tuple[int, int], list] = {}
    for qi, qj in queries.pairs:
        s, g = int(snapped[qi]), int(snapped[qj])
        if (s, g) not in cache:
            try:
                cache[(s, g)] = rm.shortest_paths(s, g, max_paths)
            except NoPath:
                cache[(s, g)] = []
        paths = cache[(s, g)]
        if not paths:
            n_nopath += 1
            continue
        oks = []
        for p in paths:
            ok, good = plan_ok(rm, graph, p, int(queries.labels[qi]), int(queries.labels[qj]))
            oks.append(ok)
            n_trans += len(p) - 1
            n_good += good
        n_all += all(oks)
        n_any += any(oks)
    n = len(queries)
    return PlanMetrics(_pct(n_good, n_trans) if n_trans else 100.0, _pct(n_all, n), _pct(n_any, n), n, n_nopath)


def eval_augment(new_labels: np.ndarray) -> tuple[int, float]:
    """``new_labels`` holds (label_i, label_j) rows of the new similar pairs."""
    new_labels = np.asarray(new_labels).reshape(-1, 2)
    if np.any(new_labels < 0):
        raise MissingLabels("pairs need oracle labels")
    n = len(new_labels)
    return n, _pct(int(np.sum(new_labels[:, 0] == new_labels[:, 1])), n)


def eval_edges(rm: Roadmap, graph: TransitionGraph, provenance: str = "shortcut") -> tuple[int, float]:
    keys = [k for k, e in rm.edges.items() if e.provenance == provenance]
    if any(rm.labels[i] < 0 or rm.labels[j] < 0 for i, j in keys):
        raise MissingLabels("roadmap nodes need oracle labels")
    good = sum(transition_ok(rm, graph, i, j) for i, j in keys)
    return len(keys), _pct(good, len(keys))


def eval_explore(log) -> float:
    return _pct(sum(1 for step in log if step.valid), len(log))
