"""Datasets of observation pairs, the suggestion-module rearrangement, query sets
and the ``.acepack`` container format.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import sim

MAGIC = b"ACEPACK\x00"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class EmptyResult(ValueError):
    pass


@dataclass(frozen=True)
class TrainingTuple:
    obs_a: sim.Observation
    obs_b: sim.Observation
    a: int
    u: Optional[int]

    def __post_init__(self):
        if (self.a == 0) != (self.u is None):
            raise ValueError("action flag and action payload disagree")


@dataclass
class Dataset:
    """Column store of training tuples.

    ``u`` holds an index into ``actions`` (rows of pick/place coordinates) for
    action pairs and -1 for similar pairs. ``label_a``/``label_b`` are oracle
    state ids used only for evaluation (-1 when unknown).
    """

    obs_a: np.ndarray
    obs_b: np.ndarray
    a: np.ndarray
    u: np.ndarray
    label_a: np.ndarray
    label_b: np.ndarray
    actions: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int32)
        self.u = np.asarray(self.u, dtype=np.int32)
        self.label_a = np.asarray(self.label_a, dtype=np.int32)
        self.label_b = np.asarray(self.label_b, dtype=np.int32)
        n = len(self.a)
        if not (len(self.obs_a) == len(self.obs_b) == len(self.u) == n):
            raise ValueError("column lengths differ")
        if np.any((self.a == 0) != (self.u < 0)):
            raise ValueError("action flag and action payload disagree")

    def __len__(self):
        return len(self.a)

    @property
    def counts(self) -> tuple[int, int]:
        n_act = int(self.a.sum())
        return n_act, len(self) - n_act

    @property
    def tuples(self) -> Iterator[TrainingTuple]:
        for k in range(len(self)):
            yield self.tuple(k)

    def tuple(self, k: int) -> TrainingTuple:
        la, lb = int(self.label_a[k]), int(self.label_b[k])
        return TrainingTuple(sim.Observation(self.obs_a[k], la if la >= 0 else None),
                             sim.Observation(self.obs_b[k], lb if lb >= 0 else None),
                             int(self.a[k]), int(self.u[k]) if self.a[k] else None)

    def take(self, idx, **provenance) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.obs_a[idx], self.obs_b[idx], self.a[idx], self.u[idx],
                       self.label_a[idx], self.label_b[idx], self.actions, provenance or dict(self.provenance))

    def append(self, other: "Dataset", **provenance) -> "Dataset":
        if len(other) == 0:
            return Dataset(self.obs_a, self.obs_b, self.a, self.u, self.label_a, self.label_b,
                           self.actions, provenance or dict(self.provenance))
        return Dataset(np.concatenate([self.obs_a, other.obs_a]), np.concatenate([self.obs_b, other.obs_b]),
                       np.concatenate([self.a, other.a]), np.concatenate([self.u, other.u]),
                       np.concatenate([self.label_a, other.label_a]), np.concatenate([self.label_b, other.label_b]),
                       self.actions, provenance or dict(self.provenance))

    @classmethod
    def empty_like(cls, ds: "Dataset") -> "Dataset":
        shape = (0,) + ds.obs_a.shape[1:]
        z = np.zeros(0, dtype=np.int32)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32), z, z, z, z, ds.actions, {})

    @property
    def observations(self) -> np.ndarray:
        """All ``2q`` observations: every ``obs_a`` followed by every ``obs_b``."""
        return np.concatenate([self.obs_a, self.obs_b])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.label_a, self.label_b])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.obs_a, self.obs_b, self.a, self.u):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_jsonl(self, path) -> None:
        """Tuple metadata (no pixels), one JSON object per line."""
        with open(path, "w") as fh:
            for k in range(len(self)):
                row = {"index": k, "a": int(self.a[k]),
                       "u": self.actions[self.u[k]].tolist() if self.a[k] else None,
                       "label_a": int(self.label_a[k]), "label_b": int(self.label_b[k])}
                fh.write(json.dumps(row) + "\n")


def _seed_stream(seed: int, namespace: int) -> np.random.Generator:
    return np.random.default_rng([seed, namespace])


def generate_dataset(cfg: sim.SimConfig, n_pairs: int, similar_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Random action pairs plus two-render similar pairs, shuffled."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not 0 <= similar_fraction < 1:
        raise ValueError("similar_fraction must lie in [0, 1)")
    graph = sim._graph_cached(cfg)
    rng = _seed_stream(seed, 0)
    n_sim = int(round(similar_fraction * n_pairs))
    kinds = np.array([0] * n_sim + [1] * (n_pairs - n_sim), dtype=np.int32)
    rng.shuffle(kinds)
    sa, sb, us = [], [], []
    for kind in kinds:
        s = int(rng.integers(len(graph)))
        if kind:
            acts = list(graph.succ[s].items())
            u, t = acts[int(rng.integers(len(acts)))]
        else:
            u, t = -1, s
        sa.append(s)
        sb.append(t)
        us.append(u)
    seeds = rng.integers(2**62, size=(n_pairs, 2))
    obs_a, la = sim.render_batch([graph.states[s] for s in sa], cfg, seeds[:, 0])
    obs_b, lb = sim.render_batch([graph.states[s] for s in sb], cfg, seeds[:, 1])
    prov = {"kind": "generated", "seed": seed, "n_pairs": n_pairs, "similar_fraction": similar_fraction,
            "sim": _cfg_dict(cfg)}
    return Dataset(obs_a, obs_b, kinds, us, la, lb, sim.action_coords(cfg), prov)


def _cfg_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}


def subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Uniform subset without replacement of size ``round(fraction * len(ds))``, original order kept."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = _seed_stream(seed, 1)
    k = int(round(fraction * len(ds)))
    idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    return ds.take(idx, kind="subsample", fraction=fraction, seed=seed,
                   parent=ds.provenance, parent_fingerprint=ds.fingerprint())


@dataclass
class SMDataset:
    """Pairs over a table of unique anchor observations.

    ``left``/``right`` index ``obs``; ``s`` is the similarity signal.
    ``anchor_actions[k]`` is the set of actions applied from anchor ``k``.
    """

    obs: np.ndarray
    left: np.ndarray
    right: np.ndarray
    s: np.ndarray
    anchor_actions: list

    def __len__(self):
        return len(self.s)

    @property
    def tuples(self):
        for i, j, s in zip(self.left, self.right, self.s):
            yield SMTuple(self.obs[i], self.obs[j], int(s))


@dataclass(frozen=True)
class SMTuple:
    obs_a: np.ndarray
    obs_b: np.ndarray
    s: int


def action_anchors(ds: Dataset) -> tuple[np.ndarray, list[frozenset], np.ndarray]:
    """Unique observations that start an action pair, their outgoing action sets,
    and one dataset row per anchor (first occurrence)."""
    rows = np.flatnonzero(ds.a == 1)
    keys: dict[bytes, int] = {}
    first, acts = [], []
    for r in rows:
        key = ds.obs_a[r].tobytes()
        k = keys.get(key)
        if k is None:
            keys[key] = len(first)
            first.append(r)
            acts.append({int(ds.u[r])})
        else:
            acts[k].add(int(ds.u[r]))
    first = np.asarray(first, dtype=np.int64)
    return ds.obs_a[first], [frozenset(a) for a in acts], first


def build_sm_dataset(ds: Dataset, max_pos: int = 4, max_neg: int = 4, seed: int = 0) -> SMDataset:
    """Rearrange action pairs into similar / dissimilar anchor pairs.

    Two anchors form a similar pair when some action was applied from both, and
    a dissimilar pair when two different actions were applied from them. Each
    anchor gets at most ``max_pos`` similar and ``max_neg`` dissimilar partners.
    """
    if int(ds.a.sum()) == 0:
        raise EmptyResult("dataset has no action pairs")
    obs, acts, _ = action_anchors(ds)
    rng = np.random.default_rng([seed, 2])
    by_action: dict[int, list[int]] = {}
    for k, aset in enumerate(acts):
        for u in aset:
            by_action.setdefault(u, []).append(k)
    n = len(acts)
    pairs: dict[tuple[int, int, int], None] = {}
    for i in range(n):
        pos = sorted({j for u in acts[i] for j in by_action[u] if j != i})
        if len(pos) > max_pos:
            pos = sorted(rng.choice(pos, size=max_pos, replace=False).tolist())
        for j in pos:
            pairs[(min(i, j), max(i, j), 1)] = None
        neg = []
        for j in _sample_negatives(i, n, acts, max_neg, rng):
            neg.append(j)
        for j in neg:
            pairs[(min(i, j), max(i, j), 0)] = None
    if not pairs:
        raise EmptyResult("no anchor pairs could be formed")
    arr = np.array(list(pairs), dtype=np.int64).reshape(-1, 3)
    return SMDataset(obs, arr[:, 0], arr[:, 1], arr[:, 2].astype(np.int32), acts)


def _differs(a: frozenset, b: frozenset) -> bool:
    # some u1 in a and u2 in b with u1 != u2
    return len(a) > 1 or len(b) > 1 or a != b


def _sample_negatives(i, n, acts, k, rng):
    if n <= 1 or k <= 0:
        return []
    if n - 1 <= 4 * k:
        cand = [j for j in range(n) if j != i and _differs(acts[i], acts[j])]
        if len(cand) > k:
            cand = rng.choice(cand, size=k, replace=False).tolist()
        return sorted(cand)
    out: set[int] = set()
    tries = 0
    while len(out) < k and tries < 20 * k:
        j = int(rng.integers(n))
        tries += 1
        if j != i and _differs(acts[i], acts[j]):
            out.add(j)
    return sorted(out)


@dataclass
class QuerySet:
    obs: np.ndarray
    labels: np.ndarray
    pairs: np.ndarray

    def __len__(self):
        return len(self.pairs)

    def split(self, n_first: int) -> tuple["QuerySet", "QuerySet"]:
        return (QuerySet(self.obs, self.labels, self.pairs[:n_first]),
                QuerySet(self.obs, self.labels, self.pairs[n_first:]))

    def start_goal(self, k: int) -> tuple[sim.Observation, sim.Observation]:
        i, j = self.pairs[k]
        return (sim.Observation(self.obs[i], int(self.labels[i])), sim.Observation(self.obs[j], int(self.labels[j])))


def make_queries(cfg: sim.SimConfig, n_queries: int = 1000, holdout_size: int = 2500, seed: int = 0) -> QuerySet:
    """Render a fresh holdout set (separate seed stream from training) and sample start/goal pairs."""
    if n_queries > holdout_size ** 2:
        raise ValueError("n_queries exceeds holdout_size**2")
    graph = sim._graph_cached(cfg)
    rng = _seed_stream(seed, 3)
    states = rng.integers(len(graph), size=holdout_size)
    seeds = rng.integers(2**62, size=holdout_size)
    obs, labels = sim.render_batch([graph.states[s] for s in states], cfg, seeds)
    pairs = rng.integers(holdout_size, size=(n_queries, 2))
    return QuerySet(obs, labels, pairs)


# --- container -------------------------------------------------------------

def write_pack(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """``MAGIC | u32 version | u64 header_len | JSON header | blobs``."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f4" if arr.dtype.kind == "f" else "i4"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_pack(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError("truncated preamble", len(raw))
    if raw[:8] != MAGIC:
        raise FormatError("bad magic", 0)
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise FormatError(f"version {version} unsupported (expected {VERSION})", 8)
    start = 20
    if start + hlen > len(raw):
        raise FormatError("truncated header", len(raw))
    try:
        header = json.loads(raw[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", start) from None
    base = start + hlen
    arrays = {}
    for t in header.get("tensors", []):
        lo = base + t["offset"]
        hi = lo + t["nbytes"]
        if hi > len(raw):
            raise FormatError(f"truncated tensor {t['name']!r}", len(raw))
        dt = _DTYPES.get(t["dtype"])
        if dt is None:
            raise FormatError(f"unknown dtype {t['dtype']!r}", start)
        arr = np.frombuffer(raw, dtype=dt, count=t["nbytes"] // dt.itemsize, offset=lo)
        arrays[t["name"]] = arr.reshape(t["shape"]).copy()
    return header["kind"], header.get("meta", {}), arrays


def save(obj, path) -> None:
    """Persist a Dataset, model, index or roadmap (anything with ``to_pack``)."""
    if isinstance(obj, Dataset):
        arrays = {"obs_a": obj.obs_a, "obs_b": obj.obs_b, "a": obj.a, "u": obj.u,
                  "label_a": obj.label_a, "label_b": obj.label_b, "actions": obj.actions}
        write_pack(path, "dataset", {"provenance": obj.provenance}, arrays)
        return
    kind, meta, arrays = obj.to_pack()
    write_pack(path, kind, meta, arrays)


def load(path):
    kind, meta, arrays = read_pack(path)
    if kind == "dataset":
        return Dataset(arrays["obs_a"], arrays["obs_b"], arrays["a"], arrays["u"], arrays["label_a"],
                       arrays["label_b"], arrays["actions"].astype(np.float64), meta.get("provenance", {}))
    from . import lpm, mapping, roadmap, suggestion
    loaders = {"mm": mapping.MMParams, "lpm": lpm.LPMParams, "sm": suggestion.SMParams,
               "sm_index": suggestion.SuggestionIndex, "roadmap": roadmap.Roadmap}
    if kind not in loaders:
        raise FormatError(f"unknown kind {kind!r}", 20)
    return loaders[kind].from_pack(meta, arrays)
