"""``cecdr`` command line: one subcommand per pipeline stage plus the experiment drivers.

Stages communicate only through files in ``--out``::

    generate    -> log.tsv, truth.tsv, content.emb
    label       -> behavior.emb, dataset.tsv
    train-dcmm  -> dcmm_f.ckpt, dcmm_e.ckpt, dcmm_trace.csv, r_s.txt
    train-rec   -> rec.ckpt, rec_trace.csv (+ gate.tsv)
    eval        -> metrics.csv, metrics.md

``heatmap``, ``sweep-tau``, ``ablate`` and ``serve-sim`` run end to end from
the config. Every run echoes its resolved config to ``<cmd>.config.txt`` and
writes ``<cmd>.manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import cem, clm, dcmm, evalkit, pipeline, serving
from .config import ConfigError, ExperimentConfig, load_config
from .gradcore import load_checkpoint, save_checkpoint
from .synthworld import ConfigError as WorldConfigError
from .synthworld import (EmbeddingTable, export_ground_truth, export_log, generate_world,
                         import_log)

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("cecdr")


class InputError(Exception):
    """A required input artifact is missing or unreadable."""


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Tracks one subcommand's inputs and outputs and writes its manifest."""

    def __init__(self, cmd: str, cfg: ExperimentConfig, out: Path):
        self.cmd, self.cfg, self.out = cmd, cfg, out
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)
        text = cfg.dumps()
        sys.stdout.write(text)
        self.output(f"{cmd}.config.txt").write_text(text, encoding="utf-8", newline="\n")

    def need(self, name: str) -> Path:
        p = self.out / name
        if not p.is_file():
            raise InputError(f"missing input: {p}")
        self.inputs[name] = sha256(p)
        return p

    def output(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def finish(self) -> dict:
        h = hashlib.sha256(self.cmd.encode())
        h.update(self.cfg.digest().encode())
        for k in sorted(self.inputs):
            h.update(f"{k}={self.inputs[k]}".encode())
        manifest = {
            "command": self.cmd,
            "run_id": h.hexdigest()[:16],
            "config_digest": self.cfg.digest(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: sha256(self.out / n) for n in self.outputs},
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / f"{self.cmd}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest


# --- shared loaders -------------------------------------------------------------------

def _load_log(run: Run):
    try:
        return import_log(run.need("log.tsv"))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load_table(run: Run, name: str) -> EmbeddingTable:
    try:
        return clm.import_embeddings(run.need(name))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _split_and_tables(run: Run):
    log_ = _load_log(run)
    content = _load_table(run, "content.emb")
    if content.source.shape[0] != log_.n_source_items or content.target.shape[0] != log_.n_target_items:
        # the log's catalog sizes are inferred from ids; the content table is authoritative
        log_ = type(log_)(log_.user, log_.domain, log_.item, log_.ts, log_.n_users,
                          content.source.shape[0], content.target.shape[0])
    return evalkit.leave_one_out(log_), content


def _causal_model(cfg: ExperimentConfig, split, content, state: dict) -> dcmm.CausalModel:
    tr = split.train
    feats = dcmm.user_features(tr, content)
    f = dcmm.CausalModel(tr.n_source_items, tr.n_target_items, content, feats.shape[1],
                         cfg.dcmm(cfg.seed, "bce" if cfg.no_cas else "plcl"), seed=cfg.seed)
    f.params.load_state_dict(state)
    return f


def _rec_cfg(cfg: ExperimentConfig) -> cem.CEMConfig:
    return cfg.cem(cfg.seed, enhanced=not cfg.base_model, no_att=cfg.no_att, no_gate=cfg.no_gate)


def _write_rows(path: Path, rows: list[dict]) -> None:
    evalkit.write_metrics_csv(rows, path)


# --- stages -------------------------------------------------------------------------

def cmd_generate(run: Run) -> None:
    w = generate_world(run.cfg.world())
    export_log(w.log, run.output("log.tsv"))
    export_ground_truth(w.truth, run.output("truth.tsv"))
    clm.export_embeddings(w.content, run.output("content.emb"))


def cmd_label(run: Run) -> None:
    cfg = run.cfg
    split, content = _split_and_tables(run)
    tr = split.train
    beh = clm.train_behavior_embeddings(tr, dim=cfg.behavior_dim, epochs=cfg.behavior_epochs,
                                        seed=cfg.seed, rounds=cfg.behavior_rounds)
    tables = clm.Tables(content, beh)
    cal = clm.fit_calibrator(tr, tables, M=cfg.calib_M, seed=cfg.seed)
    ds = clm.build_dataset(tr, cal, tables, 0.0 if cfg.no_clm else cfg.tau, L_max=cfg.L_max)
    clm.export_embeddings(beh, run.output("behavior.emb"))
    clm.export_dataset(ds, run.output("dataset.tsv"))
    print(f"labeled {len(ds)} examples, {int(ds.s.sum())} positive", file=sys.stderr)


def cmd_train_dcmm(run: Run) -> None:
    cfg = run.cfg
    split, content = _split_and_tables(run)
    beh = _load_table(run, "behavior.emb")
    try:
        ds = clm.import_dataset(run.need("dataset.tsv"), tau=cfg.tau)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    tr = split.train
    feats = dcmm.user_features(tr, content)
    tgt = tr.domain != 0
    f, e, trace = dcmm.train_dcmm(ds, content, beh, feats, tr.n_source_items, tr.n_target_items,
                                  cfg.dcmm(cfg.seed, "bce" if cfg.no_cas else "plcl"),
                                  interacted=(tr.user[tgt], tr.item[tgt]))
    save_checkpoint(f.params.state_dict(), run.output("dcmm_f.ckpt"))
    save_checkpoint(e.params.state_dict(), run.output("dcmm_e.ckpt"))
    trace.write_csv(run.output("dcmm_trace.csv"))
    r_s = dcmm.represent_users(f, tr, feats, cutoff=split.cutoff())
    cem.export_representations(r_s, run.output("r_s.txt"))


def cmd_train_rec(run: Run) -> None:
    cfg = run.cfg
    split, content = _split_and_tables(run)
    tr = split.train
    rcfg = _rec_cfg(cfg)
    if rcfg.enhanced:
        r_s = cem.import_representations(run.need("r_s.txt"))
        f = _causal_model(cfg, split, content, load_checkpoint(run.need("dcmm_f.ckpt")))
        r_ev = dcmm.represent_events(f, tr, dcmm.user_features(tr, content))
        model, trace = cem.train_enhanced(tr, content.target, rcfg, r_s=r_s,
                                          c=cem.consistency_features(tr), r_s_events=r_ev)
    else:
        model, trace = cem.train_enhanced(tr, content.target, rcfg)
    save_checkpoint(model.params.state_dict(), run.output("rec.ckpt"))
    with open(run.output("rec_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace.loss):
            w.writerow([i, format(v, ".17g")])
    if rcfg.enhanced and not rcfg.no_gate:
        cem.write_gate_csv(model, tr, run.output("gate.tsv"))


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    split, content = _split_and_tables(run)
    tr = split.train
    rcfg = _rec_cfg(cfg)
    r_s = c = None
    if rcfg.enhanced:
        r_s = cem.import_representations(run.need("r_s.txt"))
        c = cem.consistency_features(tr)
    model = cem.Recommender(tr.n_users, tr.n_target_items, content.target, rcfg, r_s, c)
    try:
        model.params.load_state_dict(load_checkpoint(run.need("rec.ckpt")))
    except (KeyError, ValueError) as exc:
        raise InputError(f"rec.ckpt does not match the configured model: {exc}") from None
    rep = evalkit.evaluate(model.score_all(split.users), split, cfg.K,
                           sampled=cfg.sampled_candidates or None, seed=cfg.seed)
    rows = [rep.row()] + [{"K": cfg.K, "hr": v[0], "ndcg": v[1], "n_users": v[2],
                           "excluded": split.excluded, "bucket": k} for k, v in rep.buckets.items()]
    rows[0]["bucket"] = "all"
    _write_rows(run.output("metrics.csv"), rows)
    run.output("metrics.md").write_text(evalkit.markdown_table(rows), encoding="utf-8")
    print(f"HR@{cfg.K} {rep.hr:.4f} NDCG@{cfg.K} {rep.ndcg:.4f} users {rep.n_users}", file=sys.stderr)


def cmd_heatmap(run: Run) -> None:
    rows = []
    for seed in run.cfg.seed_list():
        hm = pipeline.heatmap_for_seed(run.cfg, seed)
        hm.write_csv(run.output(f"heatmap_seed{seed}.csv"))
        rows.append({"seed": seed, "excluded": hm.excluded, "bins": hm.mean.shape[0],
                     "spearman": hm.spearman})
    _write_rows(run.output("heatmap_summary.csv"), rows)


def cmd_sweep_tau(run: Run) -> None:
    rows = pipeline.tau_rows(run.cfg)
    _write_rows(run.output("sweep_tau.csv"), rows)
    hr, nd = pipeline.mean_by(rows, "tau"), pipeline.mean_by(rows, "tau", "ndcg")
    mean_rows = [{"tau": t, "hr": hr[t], "ndcg": nd[t]} for t in sorted(hr)]
    _write_rows(run.output("sweep_tau_mean.csv"), mean_rows)
    run.output("sweep_tau.md").write_text(evalkit.markdown_table(mean_rows), encoding="utf-8")


def cmd_ablate(run: Run) -> None:
    rows = pipeline.ablation_rows(run.cfg)
    _write_rows(run.output("ablation.csv"), rows)
    hr, nd = pipeline.mean_by(rows, "variant"), pipeline.mean_by(rows, "variant", "ndcg")
    table = [{"variant": pipeline.LABELS[v], "hr": hr[v], "ndcg": nd[v]}
             for v in pipeline.VARIANTS if v in hr]
    run.output("ablation.md").write_text(evalkit.markdown_table(table), encoding="utf-8")


def cmd_serve_sim(run: Run) -> None:
    cfg = run.cfg
    ex = pipeline.Experiment(cfg, cfg.seed)
    stage = ex.causal(cfg.tau)
    rec = ex.recommender("full")
    before = {**stage.f.params.state_dict(), **stage.e.params.state_dict()}
    res = serving.ablate_cache(stage.f, stage.e, rec, ex.split, ex.user_features, ex.calibrator,
                               ex.tables, cfg.tau, day_events=cfg.day_events,
                               refresh=cfg.refresh, K=cfg.K, seed=cfg.seed)
    state = res.state
    fc = serving.freeze_check(before, state.snapshot_state(), state.sparse_names())
    _write_rows(run.output("serve_day.csv"), [res.day.row()])
    _write_rows(run.output("cache_ablation.csv"), [
        {"K": cfg.K, "hr_cached": res.cached.hr, "hr_fresh": res.fresh.hr, "delta_hr": res.delta_hr,
         "ndcg_cached": res.cached.ndcg, "ndcg_fresh": res.fresh.ndcg, "delta_ndcg": res.delta_ndcg,
         "mismatched_users": res.mismatched_users}])
    lines = [f"dense_identical\t{str(fc.dense_identical).lower()}",
             f"drifted\t{','.join(fc.drifted)}"]
    lines += [f"changed_rows\t{n}\t{rows.size}" for n, rows in sorted(fc.changed_rows.items())]
    run.output("freeze_check.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    state.cache.write_snapshot(run.output("cache_snapshot.txt"), state.tick)


COMMANDS = {
    "generate": cmd_generate, "label": cmd_label, "train-dcmm": cmd_train_dcmm,
    "train-rec": cmd_train_rec, "eval": cmd_eval, "heatmap": cmd_heatmap,
    "sweep-tau": cmd_sweep_tau, "serve-sim": cmd_serve_sim, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cecdr", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", metavar="DIR", default="run", help="artifact directory (default: ./run)")
    p.add_argument("--seed", type=int, help="seed for this run (also replaces the seed list)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed, seeds=str(args.seed))
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, WorldConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = Run(args.command, cfg, Path(args.out))
        COMMANDS[args.command](run)
        run.finish()
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, WorldConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dcmm.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
