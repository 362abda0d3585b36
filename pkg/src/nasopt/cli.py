"""Command-line orchestration: search runs, training, transfer, ensembles.

One YAML config file fully determines a search experiment; every run
artifact (CSV logs, JSON summaries, checkpoints) is schema-versioned and
written with round-trip-exact float formatting so reruns with the same
config produce byte-identical logs.  Repeats are independent and may be
spread over a process pool; record streams never depend on the worker
count because each repeat owns a seed derived from (master seed, repeat
index) and runs sequentially inside one process.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys

import numpy as np
import yaml

from . import autodiff as ad
from . import builder as nb
from . import ensemble as en
from . import genotype as gt
from . import objectives as obj
from . import plots
from . import search as se
from . import trainer as tr
from . import verify

CONFIG_SCHEMA = "nasopt-config/v1"
TRAIN_LOG_SCHEMA = "nasopt-train-log/v1"
SUMMARY_SCHEMA = "nasopt-summary/v1"
TRAIN_LOG_FIELDS = ("epoch", "loss", "best_f", "evals")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

_BUILD_KEYS = {"num_cells": 3, "channels": 8, "input_size": 32, "num_sol": 500}
_TRAIN_KEYS = {"max_epochs": 200, "lr": 0.001, "psi": 0.01, "rung_epochs": 5,
               "growth": 3}


def _require(mapping, key, kind, where):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required field {key!r}")
    val = mapping[key]
    if not isinstance(val, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, "
                          f"got {type(val).__name__} ({val!r})")
    return val


def load_config(path):
    """Parse and validate an experiment config; diagnostics name the field."""
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    where = os.path.basename(path)
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"{where}.schema: expected {CONFIG_SCHEMA!r}, "
                          f"got {doc.get('schema')!r}")
    cfg = {
        "schema": CONFIG_SCHEMA,
        "objective": _require(doc, "objective", str, where),
        "strategy": _require(doc, "strategy", str, where),
        "budget": _require(doc, "budget", int, where),
        "repeats": int(doc.get("repeats", 1)),
        "seed": _require(doc, "seed", int, where),
        "out": str(doc.get("out", "runs/experiment")),
        "build": dict(_BUILD_KEYS), "train": dict(_TRAIN_KEYS),
    }
    if cfg["strategy"] not in ("random", "rl", "mac"):
        raise ConfigError(f"{where}.strategy: unknown strategy "
                          f"{cfg['strategy']!r}")
    if cfg["budget"] <= 0 or cfg["repeats"] <= 0:
        raise ConfigError(f"{where}: budget and repeats must be positive")
    for section, defaults in (("build", _BUILD_KEYS), ("train", _TRAIN_KEYS)):
        extra = doc.get(section, {})
        if not isinstance(extra, dict):
            raise ConfigError(f"{where}.{section}: expected a mapping")
        for key, val in extra.items():
            if key not in defaults:
                raise ConfigError(f"{where}.{section}.{key}: unknown field")
            cfg[section][key] = val
    obj.parse_objective(cfg["objective"])     # fail fast on bad specs
    return cfg


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def _build_cfg_for(objective, build):
    return nb.BuildConfig(dim=objective.dim, lo=objective.lo, hi=objective.hi,
                          num_cells=build["num_cells"],
                          channels=build["channels"],
                          input_size=build["input_size"],
                          num_sol=build["num_sol"])


def _train_cfg_for(train):
    return tr.TrainConfig(max_epochs=train["max_epochs"],
                          adam=ad.AdamConfig(lr=train["lr"]),
                          psi=train["psi"], rung_epochs=train["rung_epochs"],
                          growth=train["growth"])


# ---------------------------------------------------------------------------
# log files
# ---------------------------------------------------------------------------

def write_search_log(records, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {se.SEARCH_LOG_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=se.SEARCH_LOG_FIELDS,
                                lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.csv_row())


def read_search_log(path):
    """Rows of a search log; rejects files with a different schema tag."""
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if head != f"# {se.SEARCH_LOG_SCHEMA}":
            raise ConfigError(f"{path}: unknown search-log schema {head!r}")
        return list(csv.DictReader(fh))


def write_train_log(report, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TRAIN_LOG_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS,
                                lineterminator="\n")
        writer.writeheader()
        for epoch in range(1, len(report.loss_history) + 1):
            writer.writerow({
                "epoch": epoch,
                "loss": repr(float(report.loss_history[epoch - 1])),
                "best_f": repr(float(report.epoch_bests[epoch - 1])),
                "evals": report.epoch_evals[epoch - 1],
            })


def read_train_log(path):
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if head != f"# {TRAIN_LOG_SCHEMA}":
            raise ConfigError(f"{path}: unknown train-log schema {head!r}")
        return list(csv.DictReader(fh))


def _report_json(report):
    return {
        "f_best": float(report.f_best),
        "f_first": None if report.f_first is None else float(report.f_first),
        "x_best": None if report.x_best is None
        else [float(v) for v in report.x_best],
        "evals": report.evals,
        "epochs_run": report.epochs_run,
        "stop_reason": report.stop_reason,
        "loss_history": [float(v) for v in report.loss_history],
        "epoch_bests": [float(v) for v in report.epoch_bests],
    }


# ---------------------------------------------------------------------------
# search command
# ---------------------------------------------------------------------------

def _run_one_repeat(cfg, repeat, resume):
    objective = obj.parse_objective(cfg["objective"])
    build_cfg = _build_cfg_for(objective, cfg["build"])
    train_cfg = _train_cfg_for(cfg["train"])
    seed = se.derive_seed(cfg["seed"], 1000 + repeat)
    strategy = se.make_strategy(cfg["strategy"], seed)

    rep_dir = os.path.join(cfg["out"], f"repeat{repeat:02d}")
    os.makedirs(rep_dir, exist_ok=True)
    log_path = os.path.join(rep_dir, "search_log.csv")

    replay = None
    if resume and os.path.exists(log_path):
        replay = read_search_log(log_path)
    result = se.run_search(strategy, objective, cfg["budget"], build_cfg,
                           train_cfg, seed=seed, replay_records=replay)

    write_search_log(result.history.records, log_path)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "objective": cfg["objective"], "strategy": cfg["strategy"],
        "budget": cfg["budget"], "repeat": repeat, "seed": seed,
        "best_cost": repr(float(result.history.best_cost)),
        "best_genotype": (result.best_genotype.to_text()
                          if result.best_genotype else None),
        "cum_evals": result.history.cum_evals,
        "records": len(result.history.records),
        "first_eval": (None if result.history.first_eval_cost is None
                       else repr(float(result.history.first_eval_cost))),
        "stop_reason": result.stop_reason,
        "x_best": (None if result.best_network is None
                   else result.best_network.meta.get("x_best")),
    }
    with open(os.path.join(rep_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if result.best_network is not None:
        nb.save_checkpoint(result.best_network,
                           os.path.join(rep_dir, "best_checkpoint.json"))
    _render_repeat_figures(result, rep_dir)
    return summary


def _render_repeat_figures(result, rep_dir):
    trained = [r for r in result.history.records if r.evals_spent > 0]
    if trained:
        series = {"search": ([r.cum_evals for r in trained],
                             [r.best_cost for r in trained])}
        plots.convergence_figure(series,
                                 os.path.join(rep_dir, "convergence.png"))


def cmd_search(args):
    cfg = load_config(args.config)
    if args.out:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    os.makedirs(cfg["out"], exist_ok=True)
    dump_config(cfg, os.path.join(cfg["out"], "config.yaml"))

    repeats = list(range(cfg["repeats"]))
    workers = args.workers or min(len(repeats), os.cpu_count() or 1)
    if workers > 1 and len(repeats) > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            futures = {pool.submit(_run_one_repeat, cfg, r, args.resume): r
                       for r in repeats}
            summaries = [None] * len(repeats)
            for fut, r in futures.items():
                summaries[r] = fut.result()
    else:
        summaries = [_run_one_repeat(cfg, r, args.resume) for r in repeats]

    best = min(summaries, key=lambda s: float(s["best_cost"]))
    combined = {
        "schema": SUMMARY_SCHEMA, "objective": cfg["objective"],
        "strategy": cfg["strategy"], "repeats": cfg["repeats"],
        "best_cost": best["best_cost"], "best_repeat": best["repeat"],
        "best_genotype": best["best_genotype"],
    }
    with open(os.path.join(cfg["out"], "summary.json"), "w") as fh:
        json.dump(combined, fh, indent=2, sort_keys=True)
    _render_combined_figures(cfg, summaries)
    print(f"best cost {best['best_cost']} (repeat {best['repeat']}) "
          f"-> {cfg['out']}")
    return 0


def _render_combined_figures(cfg, summaries):
    series = {}
    solutions = {}
    for s in summaries:
        rep_dir = os.path.join(cfg["out"], f"repeat{s['repeat']:02d}")
        rows = read_search_log(os.path.join(rep_dir, "search_log.csv"))
        trained = [r for r in rows if int(r["evals_spent"]) > 0]
        if trained:
            series[f"repeat{s['repeat']}"] = (
                [int(r["cum_evals"]) for r in trained],
                [float(r["best_cost"]) for r in trained])
        ck = os.path.join(rep_dir, "best_checkpoint.json")
        if os.path.exists(ck):
            with open(ck) as fh:
                meta = json.load(fh).get("meta", {})
            if meta.get("x_best"):
                solutions[f"repeat{s['repeat']}"] = meta["x_best"]
    if series:
        plots.convergence_figure(series,
                                 os.path.join(cfg["out"], "convergence.png"),
                                 title=f"{cfg['objective']} / {cfg['strategy']}")
    if solutions:
        plots.radar_figure(solutions,
                           os.path.join(cfg["out"], "solutions_radar.png"))


# ---------------------------------------------------------------------------
# other commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    objective = obj.parse_objective(args.objective)
    genotype = gt.Genotype.from_text(args.genotype)
    build_cfg = _build_cfg_for(objective, dict(
        _BUILD_KEYS, num_cells=args.cells, input_size=args.input_size,
        num_sol=args.num_sol))
    network = nb.build(genotype, build_cfg)
    nb.init_weights(network, seed=args.seed)
    batch = nb.InputBatch(build_cfg.num_sol, build_cfg.input_size,
                          seed=se.derive_seed(args.seed, 7))
    cfg = tr.TrainConfig(max_epochs=args.epochs,
                         adam=ad.AdamConfig(lr=args.lr), psi=args.psi)
    try:
        report = tr.train(network, objective, batch, cfg)
    except tr.TrainAbort as abort:
        report = abort.report
        print(f"training aborted: {abort}", file=sys.stderr)
    network.meta["x_best"] = (None if report.x_best is None
                              else [float(v) for v in report.x_best])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_train_log(report, os.path.join(args.out, "train_log.csv"))
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump({"schema": SUMMARY_SCHEMA, **_report_json(report)},
                      fh, indent=2, sort_keys=True)
        nb.save_checkpoint(network, os.path.join(args.out, "checkpoint.json"))
        if report.loss_history:
            plots.training_figure(
                list(range(1, len(report.loss_history) + 1)),
                report.loss_history, report.epoch_bests,
                os.path.join(args.out, "loss_curve.png"),
                title=f"{args.objective} training")
    print(json.dumps({"f_best": report.f_best, "evals": report.evals,
                      "epochs": report.epochs_run,
                      "stop": report.stop_reason}))
    return 0


def cmd_transfer(args):
    objective = obj.parse_objective(args.objective)
    if args.mode == "nas1":
        if not args.checkpoint:
            raise ConfigError("nas1 transfer requires --checkpoint")
        report, network = en.transfer_nas1(args.checkpoint, objective,
                                           cutoff=args.cutoff, seed=args.seed)
    else:
        if not args.genotype and not args.checkpoint:
            raise ConfigError("nas2 transfer requires --genotype or --checkpoint")
        if args.genotype:
            genotype = gt.Genotype.from_text(args.genotype)
            build = nb.BuildConfig(dim=objective.dim, lo=objective.lo,
                                   hi=objective.hi)
        else:
            src = nb.load_checkpoint(args.checkpoint)
            genotype, build = src.genotype, src.cfg
        report, network = en.transfer_nas2(genotype, objective, build,
                                           cutoff=args.cutoff, seed=args.seed)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"transfer_{args.mode}.json"), "w") as fh:
            json.dump({"schema": SUMMARY_SCHEMA, "mode": args.mode,
                       "objective": args.objective, "cutoff": args.cutoff,
                       **_report_json(report)}, fh, indent=2, sort_keys=True)
        nb.save_checkpoint(network,
                           os.path.join(args.out, f"transfer_{args.mode}.ckpt.json"))
    print(json.dumps({"mode": args.mode, "f_best": report.f_best,
                      "evals": report.evals}))
    return 0


def cmd_ensemble(args):
    spec = en.load_manifest(args.manifest)
    objective = obj.parse_objective(spec.objective_id)
    result = en.run_ensemble(spec, objective, seed=args.seed)
    doc = {"schema": SUMMARY_SCHEMA, "scheme": spec.scheme,
           "objective": spec.objective_id, "cutoff": spec.cutoff,
           "members": len(spec.checkpoints), **_report_json(result.report)}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ensemble_report.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
    print(json.dumps({"scheme": spec.scheme, "f_best": result.report.f_best,
                      "evals": result.report.evals}))
    return 0


def cmd_protein(args):
    table = obj.protein_table()
    if args.sequence_id not in table:
        print(f"unknown protein id {args.sequence_id!r}; known: "
              f"{', '.join(sorted(table))}", file=sys.stderr)
        return 2
    model = obj.ProteinModel(table[args.sequence_id], args.sequence_id)
    text = open(args.angles).read().replace(",", " ").split()
    angles = np.array([float(v) for v in text])
    if angles.size != model.dim:
        print(f"{args.sequence_id} needs {model.dim} angles, "
              f"got {angles.size}", file=sys.stderr)
        return 2
    energy = obj.protein_energy(model, angles)
    print(repr(energy))
    return 0


def cmd_verify(args):
    ok = verify.run_all()
    print("verify: all checks passed" if ok else "verify: FAILURES")
    return 0 if ok else 1


def cmd_report(args):
    """Re-render figures from an existing run directory."""
    summaries = []
    for name in sorted(os.listdir(args.run)):
        sub = os.path.join(args.run, name)
        sj = os.path.join(sub, "summary.json")
        if os.path.isdir(sub) and os.path.exists(sj):
            with open(sj) as fh:
                summaries.append(json.load(fh))
    if not summaries:
        print(f"no repeat summaries under {args.run}", file=sys.stderr)
        return 2
    cfg_path = os.path.join(args.run, "config.yaml")
    cfg = load_config(cfg_path)
    cfg["out"] = args.run
    _render_combined_figures(cfg, summaries)
    print(f"figures written to {args.run}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="nasopt",
        description="architecture search for learned numerical optimizers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a configured search experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train one genotype on one objective")
    p.add_argument("--genotype", required=True)
    p.add_argument("--objective", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--psi", type=float, default=None)
    p.add_argument("--cells", type=int, default=3)
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--num-sol", type=int, default=500)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="move a network to a new dimension")
    p.add_argument("--mode", choices=("nas1", "nas2"), required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--genotype", default=None)
    p.add_argument("--objective", required=True)
    p.add_argument("--cutoff", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ensemble", help="combine checkpoints per a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("protein", help="evaluate a protein energy")
    p.add_argument("sequence_id")
    p.add_argument("--angles", required=True)
    p.set_defaults(func=cmd_protein)

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="re-render figures for a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, gt.GenotypeError, obj.ObjectiveError,
            nb.BuildError, se.SearchConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
