"""Box-stacking environment with exact state/action enumeration.

Boxes live on a grid of ``columns`` stacks, each at most ``max_height`` tall.
States are tuples of stacks (bottom-to-top box ids), actions are
(pick cell, place cell) pairs with 1-based column and height level.
"""
from __future__ import annotations

import colorsys
import itertools
from collections import deque
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

UnderlyingState = tuple[tuple[int, ...], ...]

BACKGROUND = 0.15
BOX_FRACTION = 0.6


class InvalidAction(ValueError):
    """Raised by :func:`apply_action` when an action breaks the stacking rules."""

    REASONS = ("empty-pick", "not-top", "full-destination", "wrong-level", "same-column")

    def __init__(self, reason: str, action=None, state=None):
        super().__init__(f"{reason}: {action} on {state}")
        self.reason = reason
        self.action = action
        self.state = state


@dataclass(frozen=True)
class SimConfig:
    columns: int = 3
    max_height: int = 3
    n_boxes: int = 4
    image_side: int = 32
    position_noise: float = 0.17
    brightness_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.columns < 1 or self.max_height < 1:
            raise ValueError("columns and max_height must be >= 1")
        if not 0 <= self.n_boxes <= self.columns * self.max_height:
            raise ValueError(f"n_boxes={self.n_boxes} does not fit the grid")
        if not 0 <= self.position_noise < 0.5:
            raise ValueError("position_noise must lie in [0, 0.5)")
        lo, hi = self.brightness_range
        if lo > hi:
            raise ValueError("brightness_range low > high")
        object.__setattr__(self, "brightness_range", (float(lo), float(hi)))

    def noiseless(self) -> "SimConfig":
        return replace(self, position_noise=0.0, brightness_range=(1.0, 1.0))


class GridAction(NamedTuple):
    """Pick the box at (pick_col, pick_level) and place it at (place_col, place_level).

    All coordinates are 1-based; level 1 is the bottom of a stack.
    """

    pick_col: int
    pick_level: int
    place_col: int
    place_level: int

    def reverse(self) -> "GridAction":
        return GridAction(self.place_col, self.place_level, self.pick_col, self.pick_level)


@dataclass(frozen=True)
class Observation:
    pixels: np.ndarray
    meta_label: Optional[int] = None


def _heights_up_to(total: int, columns: int, cap: int):
    for hs in itertools.product(range(cap + 1), repeat=columns):
        if sum(hs) == total:
            yield hs


@lru_cache(maxsize=32)
def _enumerate_states_cached(cfg: SimConfig) -> tuple[UnderlyingState, ...]:
    out = []
    for heights in _heights_up_to(cfg.n_boxes, cfg.columns, cfg.max_height):
        for perm in itertools.permutations(range(cfg.n_boxes)):
            stacks, pos = [], 0
            for h in heights:
                stacks.append(tuple(perm[pos:pos + h]))
                pos += h
            out.append(tuple(stacks))
    return tuple(sorted(set(out)))


def enumerate_states(cfg: SimConfig) -> list[UnderlyingState]:
    """All arrangements of ``n_boxes`` distinct boxes, in lexicographic order."""
    return list(_enumerate_states_cached(cfg))


def state_index(cfg: SimConfig) -> dict[UnderlyingState, int]:
    return _state_index_cached(cfg)


@lru_cache(maxsize=32)
def _state_index_cached(cfg: SimConfig) -> dict:
    return {s: i for i, s in enumerate(_enumerate_states_cached(cfg))}


def valid_actions(state: UnderlyingState, max_height: int = 3) -> set[GridAction]:
    heights = [len(s) for s in state]
    acts = set()
    for c, hc in enumerate(heights):
        if hc == 0:
            continue
        for d, hd in enumerate(heights):
            if d != c and hd < max_height:
                acts.add(GridAction(c + 1, hc, d + 1, hd + 1))
    return acts


@lru_cache(maxsize=32)
def _enumerate_actions_cached(cfg: SimConfig) -> tuple[GridAction, ...]:
    acts = set()
    for s in _enumerate_states_cached(cfg):
        acts |= valid_actions(s, cfg.max_height)
    return tuple(sorted(acts))


def enumerate_actions(cfg: SimConfig) -> list[GridAction]:
    """Every (pick, place) pair that is valid in at least one state, sorted."""
    return list(_enumerate_actions_cached(cfg))


def action_coords(cfg: SimConfig) -> np.ndarray:
    """Action table as a float array of rows (pick_col, pick_level, place_col, place_level)."""
    return np.asarray(_enumerate_actions_cached(cfg), dtype=np.float64).reshape(-1, 4)


def apply_action(state: UnderlyingState, action: GridAction, max_height: int = 3) -> UnderlyingState:
    """Return the successor of ``state`` under ``action``; the input is left untouched."""
    pc, pl, dc, dl = action
    ncols = len(state)
    if pc == dc:
        raise InvalidAction("same-column", action, state)
    if not 1 <= pc <= ncols or pl < 1 or pl > len(state[pc - 1]):
        raise InvalidAction("empty-pick", action, state)
    if pl != len(state[pc - 1]):
        raise InvalidAction("not-top", action, state)
    if not 1 <= dc <= ncols:
        raise InvalidAction("wrong-level", action, state)
    hd = len(state[dc - 1])
    if hd >= max_height:
        raise InvalidAction("full-destination", action, state)
    if dl != hd + 1:
        raise InvalidAction("wrong-level", action, state)
    stacks = list(state)
    box = stacks[pc - 1][-1]
    stacks[pc - 1] = stacks[pc - 1][:-1]
    stacks[dc - 1] = stacks[dc - 1] + (box,)
    return tuple(stacks)


def box_colors(n_boxes: int) -> np.ndarray:
    """Fully saturated, evenly spaced hues; distinct from the grey background."""
    if n_boxes == 4:
        return np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], dtype=np.float32)
    cols = [colorsys.hsv_to_rgb(k / max(n_boxes, 1), 1.0, 1.0) for k in range(n_boxes)]
    return np.asarray(cols, dtype=np.float32).reshape(-1, 3)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    edges = np.arange(n + 1, dtype=np.float64)
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, 1.0)


def _cell_size(cfg: SimConfig) -> tuple[float, float]:
    return cfg.image_side / cfg.columns, cfg.image_side / cfg.max_height


def render(state: UnderlyingState, cfg: SimConfig, rng_seed: int,
           label: Optional[int] = None) -> Observation:
    """Rasterize ``state`` with per-box positional jitter and a global brightness factor.

    Boxes are drawn with exact fractional pixel coverage, so sub-pixel jitter
    is visible in the image instead of being rounded away.
    """
    rng = np.random.default_rng(rng_seed)
    side = cfg.image_side
    cw, ch = _cell_size(cfg)
    half = 0.5 * BOX_FRACTION * min(cw, ch)
    colors = box_colors(cfg.n_boxes)
    img = np.full((side, side, 3), BACKGROUND, dtype=np.float64)
    for c, stack in enumerate(state):
        for lvl, box in enumerate(stack):
            jx, jy = rng.uniform(-cfg.position_noise, cfg.position_noise, size=2)
            cx = (c + 0.5 + jx) * cw
            # level 0 sits at the bottom row of the image
            cy = side - (lvl + 0.5 + jy) * ch
            cov = np.outer(_coverage(cy - half, cy + half, side), _coverage(cx - half, cx + half, side))
            img += cov[:, :, None] * (colors[box] - img)
    lo, hi = cfg.brightness_range
    img *= rng.uniform(lo, hi) if hi > lo else lo
    if label is None:
        label = state_index(cfg).get(state)
    return Observation(np.clip(img, 0.0, 1.0).astype(np.float32), label)


def render_batch(states: Sequence[UnderlyingState], cfg: SimConfig, seeds: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    index = state_index(cfg)
    pix = np.empty((len(states), cfg.image_side, cfg.image_side, 3), dtype=np.float32)
    labels = np.empty(len(states), dtype=np.int32)
    for k, (s, seed) in enumerate(zip(states, seeds)):
        pix[k] = render(s, cfg, int(seed), label=-1).pixels
        labels[k] = index[s]
    return pix, labels


def read_state(pixels: np.ndarray, cfg: SimConfig) -> Optional[UnderlyingState]:
    """Recover the arrangement from a render by sampling each cell center.

    Boxes always cover their cell center because the box half-size exceeds the
    maximal jitter. Colors are matched up to the global brightness factor.
    Returns ``None`` if the decoded arrangement is not a valid state.
    """
    cw, ch = _cell_size(cfg)
    side = cfg.image_side
    palette = np.vstack([box_colors(cfg.n_boxes), np.full((1, 3), BACKGROUND, dtype=np.float32)])
    palette = palette / np.linalg.norm(palette, axis=1, keepdims=True)
    stacks = []
    for c in range(cfg.columns):
        col = []
        for lvl in range(cfg.max_height):
            x = int((c + 0.5) * cw)
            y = int(side - (lvl + 0.5) * ch)
            v = pixels[y, x].astype(np.float64)
            n = np.linalg.norm(v)
            k = int(np.argmax(palette @ (v / n))) if n > 0 else cfg.n_boxes
            if k < cfg.n_boxes:
                col.append(k)
            else:
                break
        stacks.append(tuple(col))
    state = tuple(stacks)
    return state if state in state_index(cfg) else None


class TransitionGraph:
    """Ground-truth transition graph over all enumerated states.

    ``succ[i][a]`` is the successor index of state ``i`` under action index ``a``
    (indices into :func:`enumerate_actions`).
    """

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.states = enumerate_states(cfg)
        self.actions = enumerate_actions(cfg)
        self.index = state_index(cfg)
        self.action_index = {a: k for k, a in enumerate(self.actions)}
        self.succ: list[dict[int, int]] = []
        for s in self.states:
            row = {}
            for act in valid_actions(s, cfg.max_height):
                row[self.action_index[act]] = self.index[apply_action(s, act, cfg.max_height)]
            self.succ.append(dict(sorted(row.items())))
        self._dist = None

    def __len__(self):
        return len(self.states)

    def out_degree(self, i: int) -> int:
        return len(self.succ[i])

    def is_valid_transition(self, src: int, action: int, dst: int) -> bool:
        return self.succ[src].get(action) == dst

    def bfs(self, src: int) -> np.ndarray:
        dist = np.full(len(self.states), -1, dtype=np.int64)
        dist[src] = 0
        queue = deque([src])
        while queue:
            i = queue.popleft()
            for j in self.succ[i].values():
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    @property
    def distances(self) -> np.ndarray:
        if self._dist is None:
            rows, cols = [], []
            for i, row in enumerate(self.succ):
                rows.extend([i] * len(row))
                cols.extend(row.values())
            adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(self.states),) * 2)
            self._dist = shortest_path(adj, directed=True, unweighted=True)
        return self._dist

    def shortest_path_length(self, src: int, dst: int) -> int:
        d = self.distances[src, dst]
        return -1 if np.isinf(d) else int(d)

    def is_strongly_connected(self) -> bool:
        return bool(np.isfinite(self.distances).all())


def ground_truth_graph(cfg: SimConfig) -> TransitionGraph:
    return TransitionGraph(cfg)


class BoxStackEnv:
    """Stateful wrapper used by the explorers: observe, act, reset on failure."""

    def __init__(self, cfg: SimConfig, seed: int):
        self.cfg = cfg
        self.graph = _graph_cached(cfg)
        self.rng = np.random.default_rng([seed, 7])
        self.state = 0
        self.reset()

    def reset(self) -> int:
        self.state = int(self.rng.integers(len(self.graph)))
        return self.state

    def observe(self) -> Observation:
        s = self.graph.states[self.state]
        return render(s, self.cfg, int(self.rng.integers(2**62)), label=self.state)

    def step(self, action: int) -> bool:
        """Execute action index ``action``; returns False (without moving) if invalid."""
        nxt = self.graph.succ[self.state].get(int(action))
        if nxt is None:
            return False
        self.state = nxt
        return True


@lru_cache(maxsize=8)
def _graph_cached(cfg: SimConfig) -> TransitionGraph:
    return TransitionGraph(cfg)


def reverse_action_index(cfg: SimConfig, action: int) -> Optional[int]:
    acts = _enumerate_actions_cached(cfg)
    rev = acts[action].reverse()
    return _graph_cached(cfg).action_index.get(rev)


class StateIndicatorEncoder:
    """Oracle embedding: ``scale`` times the one-hot of the state read from the pixels.

    Unreadable observations map to the zero vector. ``decode`` returns the
    noiseless render of the arg-max state.
    """

    def __init__(self, cfg: SimConfig, scale: float = 10.0):
        self.cfg = cfg
        self.scale = scale
        self.index = state_index(cfg)
        self.states = enumerate_states(cfg)
        self.latent_dim = len(self.states)

    def labels(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        batch = obs.reshape(-1, self.cfg.image_side, self.cfg.image_side, 3)
        out = np.empty(len(batch), dtype=np.int64)
        for k, px in enumerate(batch):
            s = read_state(px, self.cfg)
            out[k] = -1 if s is None else self.index[s]
        return out

    def encode(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        single = obs.ndim == 3
        lab = self.labels(obs)
        z = np.zeros((len(lab), self.latent_dim))
        ok = lab >= 0
        z[np.flatnonzero(ok), lab[ok]] = self.scale
        return z[0] if single else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        single = np.ndim(z) == 1
        quiet = self.cfg.noiseless()
        out = np.stack([render(self.states[int(np.argmax(row))], quiet, 0).pixels for row in np.atleast_2d(z)])
        return out[0] if single else out
