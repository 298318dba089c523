"""Experiment orchestration: fractions x frameworks x seeds, w_eps selection on a
validation split, and JSON/CSV report emission."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ace, evaluation as ev, learncore as lc, mapping, sim
from .datastore import Dataset, QuerySet, generate_dataset, make_queries, subsample

log = logging.getLogger(__name__)

# framework name -> (augment, explore, connect)
FRAMEWORKS = {
    "eps-lsr": (None, None, False),
    "A_b": ("baseline", None, False),
    "A": ("ace", None, False),
    "C": (None, None, True),
    "E_b": (None, "random", False),
    "E": (None, "ace", False),
    "ace-lsr": ("ace", "ace", True),
}

CSV_COLUMNS = ("fraction", "framework", "seed", "metric", "value", "config_hash")
METRICS = ("pct_any", "pct_all", "pct_trans", "n_pairs", "pct_pairs", "n_edges", "pct_edges",
           "pct_explore", "w_eps", "eps", "n_nodes", "n_graph_edges", "seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    fractions: tuple = (0.3, 0.5, 0.75)
    frameworks: tuple = ("eps-lsr", "ace-lsr")
    seeds: tuple = (0, 1, 2)
    n_pairs: int = 2500
    similar_fraction: float = 0.2
    data_seed: int = 0
    subsample_seed: int = 0
    n_queries: int = 1000
    n_val_queries: int = 200
    holdout_size: int = 2500
    query_seed: int = 1
    w_grid: tuple = mapping.W_EPS_GRID
    max_paths: int = 10
    mm_epochs: int = 30
    beta_kl: float = 1e-3
    gamma_action: float = 0.1
    d_m: float = 5.0
    latent_dim: int = 16
    lpm_epochs: int = 200
    sm_epochs: int = 100
    n_explore: int = 500
    sort_order: str = "descending"
    rho_gate: float = 1.0
    w_eps_ace: float = -0.25
    image_side: int = 32

    def __post_init__(self):
        unknown = set(self.frameworks) - set(FRAMEWORKS)
        if unknown:
            raise ValueError(f"unknown frameworks {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ValueError(f"fraction {f} outside (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def sim_config(self) -> sim.SimConfig:
        return sim.SimConfig(image_side=self.image_side)

    def pipeline(self, framework: str, seed: int) -> ace.PipelineConfig:
        augment, explore, connect = FRAMEWORKS[framework]
        base = ace.PipelineConfig(
            mm_train=lc.TrainConfig(epochs=self.mm_epochs, batch_size=64),
            mm_weights=mapping.MMWeights(self.beta_kl, self.gamma_action, self.d_m),
            latent_dim=self.latent_dim,
            lpm_train=lc.TrainConfig(epochs=self.lpm_epochs, batch_size=64),
            sm_train=lc.TrainConfig(epochs=self.sm_epochs, batch_size=128),
            w_eps=self.w_eps_ace, n_explore=self.n_explore, sort_order=self.sort_order,
            rho_gate=self.rho_gate, augment=augment, explore=explore, connect=connect)
        return base.with_seed(seed)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CellResult:
    fraction: float
    framework: str
    seed: int
    config_hash: str
    metrics: dict = field(default_factory=dict)
    validation: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    error: Optional[dict] = None


def select_w(state: ace.PipelineState, cfg: ace.PipelineConfig, val: QuerySet, graph, w_grid,
             max_paths: int, latents, val_latents):
    """Grid search over w_eps; the first w with the best validation % any wins."""
    scores = []
    best = None
    for w in w_grid:
        rm, prov = ace.finalize(state, cfg, float(w), latents=latents)
        m = ev.eval_plans(rm, state.models.mm, val, graph, max_paths, latents=val_latents)
        scores.append({"w_eps": float(w), "pct_any": m.pct_any})
        if best is None or m.pct_any > best[0]:
            best = (m.pct_any, float(w), rm, prov)
    return best[1], best[2], best[3], scores


def run_cell(ds: Dataset, framework: str, seed: int, fraction: float, xcfg: ExperimentConfig,
             queries: tuple[QuerySet, QuerySet], initial=None, sm_cache=None) -> CellResult:
    scfg = xcfg.sim_config()
    graph = sim.ground_truth_graph(scfg)
    pcfg = xcfg.pipeline(framework, seed)
    h = config_hash({"experiment": xcfg.as_dict(), "pipeline": pcfg.as_dict(), "fraction": fraction,
                     "framework": framework, "seed": seed, "data": ds.fingerprint()})
    cell = CellResult(fraction, framework, seed, h)
    t0 = time.time()
    state = ace.prepare(ds, lambda s: sim.BoxStackEnv(scfg, s), pcfg,
                        lambda a: sim.reverse_action_index(scfg, a), initial=initial, sm_cache=sm_cache)
    val, test = queries
    mm = state.models.mm
    latents = np.asarray(mm.encode(state.dataset.observations))
    qz = np.asarray(mm.encode(test.obs))
    w, rm, prov, scores = select_w(state, pcfg, val, graph, xcfg.w_grid, xcfg.max_paths, latents, qz)
    pm = ev.eval_plans(rm, mm, test, graph, xcfg.max_paths, latents=qz)
    n_pairs, pct_pairs = ev.eval_augment(state.augment.labels) if state.augment else (0, float("nan"))
    n_edges, pct_edges = ev.eval_edges(rm, graph) if pcfg.connect else (0, float("nan"))
    am = ev.AceMetrics(n_pairs, pct_pairs, n_edges, pct_edges,
                       ev.eval_explore(state.explore_log) if state.explore_log else float("nan"))
    cell.metrics = {**pm.as_dict(), **am.as_dict(), "w_eps": w, "eps": mapping.epsilon(state.stats, w),
                    "n_nodes": rm.n_nodes, "n_graph_edges": len(rm.edges), "seconds": round(time.time() - t0, 2)}
    cell.validation = scores
    cell.provenance = prov
    return cell


def _aggregate(cells: list[CellResult], seeds) -> list[dict]:
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        if c.error is None and c.seed in seeds:
            groups.setdefault((c.fraction, c.framework), []).append(c)
    out = []
    for (fraction, fw), cs in sorted(groups.items()):
        row = {"fraction": fraction, "framework": fw, "seeds": [c.seed for c in cs]}
        for m in METRICS:
            vals = np.array([c.metrics.get(m, np.nan) for c in cs], dtype=float)
            ok = vals[np.isfinite(vals)]
            row[m] = {"mean": float(ok.mean()) if len(ok) else None, "std": float(ok.std()) if len(ok) else None}
        out.append(row)
    return out


def _jsonable(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return _jsonable(x.item())
    return x


def build_report(xcfg: ExperimentConfig, cells: list[CellResult], runtime: float) -> dict:
    agg = _aggregate(cells, set(xcfg.seeds))
    series = {fw: [[r["fraction"], r["pct_any"]["mean"], r["pct_any"]["std"]] for r in agg if r["framework"] == fw]
              for fw in xcfg.frameworks}
    return _jsonable({"config": xcfg.as_dict(), "config_hash": config_hash(xcfg.as_dict()),
                      "runtime_seconds": round(runtime, 2),
                      "cells": [asdict(c) for c in cells], "aggregate": agg, "series": series})


def csv_rows(report: dict) -> list[dict]:
    rows = []
    for c in report["cells"]:
        if c["error"] is not None:
            continue
        for m in METRICS:
            rows.append({"fraction": c["fraction"], "framework": c["framework"], "seed": c["seed"],
                         "metric": m, "value": c["metrics"].get(m), "config_hash": c["config_hash"]})
    return rows


def write_outputs(report: dict, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "csv": out / "results.csv", "series": out / "series.json"}
    paths["report"].write_text(json.dumps(report, indent=1))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in csv_rows(report):
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})
    paths["series"].write_text(json.dumps(report["series"], indent=1))
    return {k: str(v) for k, v in paths.items()}


def _needs(frameworks) -> tuple:
    for fw in frameworks:
        augment, explore, connect = FRAMEWORKS[fw]
        if augment == "ace" or explore == "ace" or connect:
            return ("mm", "lpm", "sm")
    return ("mm",)


def run_experiment(xcfg: ExperimentConfig, out_dir=None, full: Optional[Dataset] = None,
                   on_initial: Optional[Callable] = None) -> dict:
    """Run every (fraction, framework, seed) cell and return the report.

    First-round models are shared by all frameworks of one (fraction, seed)
    group, since they are trained on the same data with the same seed. Cell
    failures are recorded and the run continues.

    ``on_initial(fraction, seed, ds, models, stats)`` is called once per group
    with those shared models; its wall time is excluded from ``runtime_seconds``.
    """
    t0 = time.time()
    scfg = xcfg.sim_config()
    if full is None:
        full = generate_dataset(scfg, xcfg.n_pairs, xcfg.similar_fraction, xcfg.data_seed)
    queries = make_queries(scfg, xcfg.n_val_queries + xcfg.n_queries, xcfg.holdout_size, xcfg.query_seed)
    split = queries.split(xcfg.n_val_queries)
    need = _needs(xcfg.frameworks)
    cells: list[CellResult] = []
    excluded = 0.0
    for fraction in xcfg.fractions:
        ds = subsample(full, fraction, xcfg.subsample_seed)
        for seed in xcfg.seeds:
            sm_cache: dict = {}
            try:
                pc = xcfg.pipeline(xcfg.frameworks[0], seed)
                models = ace.train_models(ds, pc, need, sm_cache)
                initial = (models, mapping.latent_stats(models.mm, ds))
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                initial = None
                log.warning("first-round models failed for fraction=%s seed=%s: %s", fraction, seed, exc)
            if initial is not None and on_initial is not None:
                t_cb = time.time()
                on_initial(fraction, seed, ds, *initial)
                excluded += time.time() - t_cb
            for fw in xcfg.frameworks:
                try:
                    if initial is None:
                        raise RuntimeError("first-round model training failed")
                    cell = run_cell(ds, fw, seed, fraction, xcfg, split, initial, sm_cache)
                except Exception as exc:  # noqa: BLE001
                    cell = CellResult(fraction, fw, seed, "", error={"type": type(exc).__name__, "message": str(exc)})
                cells.append(cell)
                log.info("fraction=%s framework=%s seed=%s %s", fraction, fw, seed,
                         cell.error or {k: cell.metrics.get(k) for k in ("pct_any", "w_eps", "seconds")})
    report = build_report(xcfg, cells, time.time() - t0 - excluded)
    if out_dir is not None:
        report["outputs"] = write_outputs(report, out_dir)
    return report


def format_report(report: dict) -> str:
    """Plain-text table of mean +- std per (fraction, framework)."""
    cols = ("pct_any", "pct_all", "pct_trans", "n_pairs", "pct_pairs", "n_edges", "pct_edges", "pct_explore")
    lines = ["fraction  framework  " + "  ".join(f"{c:>15}" for c in cols)]
    for r in report["aggregate"]:
        cells = []
        for c in cols:
            m = r[c]
            cells.append(f"{'-':>15}" if m["mean"] is None else f"{m['mean']:8.1f} ± {m['std']:4.1f}")
        lines.append(f"{r['fraction']:<9} {r['framework']:<10} " + "  ".join(cells))
    return "\n".join(lines)
