"""Command-line entry point. Every subcommand writes its artifacts to ``--out-dir``
and prints a JSON summary on stdout; failures print a JSON error on stderr."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ace, datastore, evaluation as ev, experiment as ex, mapping, sim
from .lpm import LPMParams, train_lpm
from .roadmap import CoveredSpace, Roadmap, build_lsr
from .suggestion import SMParams, SuggestionIndex, build_index, train_sm


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        # plain key = value lines
        out = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"bad config line: {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                out[k] = json.loads(v)
            except json.JSONDecodeError:
                out[k] = v
        return out


def _xcfg(args) -> ex.ExperimentConfig:
    """Experiment config from ``--config`` with command-line overrides applied."""
    d = _load_config(getattr(args, "config", None))
    for key in ex.ExperimentConfig.__dataclass_fields__:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return ex.ExperimentConfig.from_dict(d)


def _out(args, name) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def _load(path, kind):
    obj = datastore.load(path)
    want = {"dataset": datastore.Dataset, "mm": mapping.MMParams, "lpm": LPMParams, "sm": SMParams,
            "sm_index": SuggestionIndex, "roadmap": Roadmap}[kind]
    if not isinstance(obj, want):
        raise CliError(f"{path} does not hold a {kind}")
    return obj


def _models(args):
    return ace.Models(_load(args.mm, "mm"), _load(args.lpm, "lpm"), _load(args.sm, "sm"),
                      _load(args.sm_index, "sm_index"))


def cmd_gen_data(args, xcfg):
    cfg = xcfg.sim_config()
    ds = datastore.generate_dataset(cfg, xcfg.n_pairs, xcfg.similar_fraction, args.seed)
    path = _out(args, "dataset.acepack")
    datastore.save(ds, path)
    q, s = ds.counts
    return {"dataset": str(path), "action_pairs": q, "similar_pairs": s, "fingerprint": ds.fingerprint()}


def cmd_subsample(args, xcfg):
    ds = _load(args.data, "dataset")
    sub = datastore.subsample(ds, args.fraction, args.seed)
    path = _out(args, f"subsample_{args.fraction:g}.acepack")
    datastore.save(sub, path)
    return {"dataset": str(path), "tuples": len(sub), "fingerprint": sub.fingerprint()}


def cmd_train(args, xcfg):
    ds = _load(args.data, "dataset")
    pc = xcfg.pipeline("ace-lsr", args.seed)
    if args.model == "mm":
        mm = mapping.train_mm(ds, pc.mm_train, pc.mm_weights, pc.latent_dim)
        st = mapping.latent_stats(mm, ds)
        path = _out(args, "mm.acepack")
        datastore.save(mm, path)
        return {"mm": str(path), "mu0": st.mu0, "sigma0": st.sigma0, "final_loss": mm.trace[-1]}
    if args.model == "lpm":
        if args.mm is None:
            raise CliError("train lpm needs --mm")
        lpm = train_lpm(ds, _load(args.mm, "mm"), pc.lpm_train)
        path = _out(args, "lpm.acepack")
        datastore.save(lpm, path)
        return {"lpm": str(path), "final_loss": lpm.trace[-1]}
    sm_ds = datastore.build_sm_dataset(ds, pc.sm_max_partners, pc.sm_max_partners, args.seed)
    sm = train_sm(sm_ds, pc.sm_train, pc.sm_margin, pc.sm_dim)
    index = build_index(sm, ds, pc.min_cluster_size)
    p1, p2 = _out(args, "sm.acepack"), _out(args, "sm_index.acepack")
    datastore.save(sm, p1)
    datastore.save(index, p2)
    return {"sm": str(p1), "sm_index": str(p2), "clusters": index.n_clusters, "final_loss": sm.trace[-1]}


def _eps(args, mm, ds):
    if getattr(args, "eps", None) is not None:
        return args.eps
    return mapping.epsilon(mapping.latent_stats(mm, ds), args.w_eps)


def cmd_build_lsr(args, xcfg):
    ds = _load(args.data, "dataset")
    mm = _load(args.mm, "mm")
    eps = _eps(args, mm, ds)
    rm = build_lsr(mm, ds, eps)
    path = _out(args, "roadmap.acepack")
    datastore.save(rm, path)
    rm.save_json(_out(args, "roadmap.json"))
    return {"roadmap": str(path), "eps": eps, "nodes": rm.n_nodes, "edges": len(rm.edges)}


def cmd_ace(args, xcfg):
    scfg = xcfg.sim_config()
    if args.step == "integrate":
        ds = _load(args.data, "dataset")
        pc = replace(xcfg.pipeline("ace-lsr", args.seed), w_eps=args.w_eps)
        res = ace.integrate(ds, lambda s: sim.BoxStackEnv(scfg, s), pc, lambda a: sim.reverse_action_index(scfg, a))
        p_rm, p_ds = _out(args, "roadmap.acepack"), _out(args, "dataset.acepack")
        datastore.save(res.roadmap, p_rm)
        datastore.save(res.state.dataset, p_ds)
        _out(args, "provenance.json").write_text(json.dumps({"config": pc.as_dict(), "stages": res.provenance},
                                                            indent=1, default=str))
        datastore.save(res.state.models.mm, _out(args, "mm.acepack"))
        return {"roadmap": str(p_rm), "dataset": str(p_ds), "nodes": res.roadmap.n_nodes,
                "edges": len(res.roadmap.edges), "stages": [s["stage"] for s in res.provenance]}
    m = _models(args)
    if args.step == "connect":
        if args.roadmap is None:
            raise CliError("ace connect needs --roadmap")
        rm = _load(args.roadmap, "roadmap")
        eps = args.eps if args.eps is not None else rm.eps
        new, added = ace.connect(rm, m.mm, m.sm, m.sm_index, m.lpm, eps, xcfg.rho_gate)
        path = _out(args, "roadmap.acepack")
        datastore.save(new, path)
        return {"roadmap": str(path), "new_edges": len(added), "edges": len(new.edges)}
    ds = _load(args.data, "dataset")
    if args.step == "augment":
        st = mapping.latent_stats(m.mm, ds)
        eps = _eps(args, m.mm, ds)
        z = np.asarray(m.mm.encode(ds.observations), dtype=np.float64)
        cfg = ace.AceConfig(r=args.radius or st.mu0, eps=eps, sort_order=xcfg.sort_order, rho_gate=xcfg.rho_gate)
        res = ace.augment(ds, m.mm, m.sm, m.sm_index, m.lpm, CoveredSpace(z, eps), cfg)
        path = _out(args, "dataset.acepack")
        datastore.save(res.dataset, path)
        n, pct = ev.eval_augment(res.labels) if np.all(res.labels >= 0) else (res.n_new, None)
        return {"dataset": str(path), "new_pairs": n, "pct_pairs": pct}
    env = sim.BoxStackEnv(scfg, args.seed)
    new, log = ace.run_exploration(env, ds, m, xcfg.n_explore, lambda a: sim.reverse_action_index(scfg, a))
    out = ds.append(new, **{**ds.provenance, "explored": len(new)})
    path = _out(args, "dataset.acepack")
    datastore.save(out, path)
    with open(_out(args, "explore_log.jsonl"), "w") as fh:
        for s in log:
            fh.write(json.dumps({"label": int(s.label), "suggested": sorted(s.suggested),
                                 "candidates": [[int(u), float(d)] for u, d in s.candidates],
                                 "chosen": int(s.chosen), "valid": bool(s.valid)}) + "\n")
    return {"dataset": str(path), "steps": len(log), "new_pairs": len(new), "pct_explore": ev.eval_explore(log)}


def cmd_eval(args, xcfg):
    cfg = xcfg.sim_config()
    rm = _load(args.roadmap, "roadmap")
    mm = _load(args.mm, "mm")
    q = datastore.make_queries(cfg, xcfg.n_queries, xcfg.holdout_size, args.seed)
    m = ev.eval_plans(rm, mm, q, sim.ground_truth_graph(cfg), xcfg.max_paths)
    n_edges, pct_edges = ev.eval_edges(rm, sim.ground_truth_graph(cfg))
    out = {**m.as_dict(), "n_shortcuts": n_edges, "pct_edges": pct_edges}
    _out(args, "eval.json").write_text(json.dumps(ex._jsonable(out), indent=1))
    return out


def cmd_experiment(args, xcfg):
    rep = ex.run_experiment(xcfg, out_dir=args.out_dir)
    return {"outputs": rep["outputs"], "runtime_seconds": rep["runtime_seconds"],
            "errors": sum(c["error"] is not None for c in rep["cells"])}


def cmd_report(args, xcfg):
    rep = json.loads(Path(args.report).read_text())
    text = ex.format_report(rep)
    path = _out(args, "report.txt")
    path.write_text(text + "\n")
    print(text, file=sys.stderr)
    return {"table": str(path), "rows": len(rep["aggregate"])}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", help="JSON or key = value file with experiment settings")
    common.add_argument("-v", "--verbose", action="store_true")
    # config-key overrides
    scalar = {"int": int, "float": float, "str": str}
    for key, f in ex.ExperimentConfig.__dataclass_fields__.items():
        if f.type in scalar:
            common.add_argument("--" + key.replace("_", "-"), dest=key, type=scalar[f.type], default=None,
                                help=argparse.SUPPRESS)
    common.add_argument("--fractions", type=float, nargs="+", default=None, help=argparse.SUPPRESS)
    common.add_argument("--frameworks", nargs="+", default=None, help=argparse.SUPPRESS)
    common.add_argument("--seeds", type=int, nargs="+", default=None, help=argparse.SUPPRESS)

    models = argparse.ArgumentParser(add_help=False)
    for name in ("mm", "lpm", "sm", "sm-index"):
        models.add_argument("--" + name)

    p = _Parser(prog="acelsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="render a training dataset")
    s = sub.add_parser("subsample", parents=[common], help="draw a fraction of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, required=True)
    s = sub.add_parser("train", parents=[common], help="train mm, lpm or sm")
    s.add_argument("model", choices=("mm", "lpm", "sm"))
    s.add_argument("--data", required=True)
    s.add_argument("--mm")
    s = sub.add_parser("build-lsr", parents=[common], help="cluster latents into a roadmap")
    s.add_argument("--data", required=True)
    s.add_argument("--mm", required=True)
    s.add_argument("--w-eps", type=float, default=-0.25)
    s.add_argument("--eps", type=float)
    s = sub.add_parser("ace", parents=[common, models], help="augment, connect, explore or integrate")
    s.add_argument("step", choices=("augment", "connect", "explore", "integrate"))
    s.add_argument("--data")
    s.add_argument("--roadmap")
    s.add_argument("--w-eps", type=float, default=-0.25)
    s.add_argument("--eps", type=float)
    s.add_argument("--radius", type=float)
    s = sub.add_parser("eval", parents=[common], help="score a roadmap on fresh queries")
    s.add_argument("--roadmap", required=True)
    s.add_argument("--mm", required=True)
    sub.add_parser("experiment", parents=[common], help="run the full comparison")
    s = sub.add_parser("report", parents=[common], help="tabulate a report.json")
    s.add_argument("--report", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "subsample": cmd_subsample, "train": cmd_train, "build-lsr": cmd_build_lsr,
            "ace": cmd_ace, "eval": cmd_eval, "experiment": cmd_experiment, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        if args.command == "ace" and args.step != "integrate":
            missing = [n for n in ("mm", "lpm", "sm", "sm_index") if getattr(args, n) is None]
            if args.step != "connect" and args.data is None:
                missing.append("data")
            if missing:
                raise CliError(f"ace {args.step} needs --" + ", --".join(m.replace("_", "-") for m in missing))
        result = COMMANDS[args.command](args, _xcfg(args))
        print(json.dumps(ex._jsonable(result), default=str))
        return 0
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as exc:  # noqa: BLE001
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, datastore.FormatError):
            err["offset"] = exc.offset
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
