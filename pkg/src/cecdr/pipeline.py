"""End-to-end experiment stages with per-seed memoization.

One :class:`Experiment` owns a single seed's world. Every stage is a pure
function of the config and seed, cached on first use so ablations and the
tau sweep share the world, split, embeddings and any causal model trained
with the same (tau, mode).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import cem, clm, dcmm, evalkit
from .config import ExperimentConfig
from .synthworld import World, generate_world

log = logging.getLogger(__name__)

VARIANTS = ("base", "full", "no_clm", "no_cas", "no_att", "no_gate", "with_cache")
LABELS = {"base": "Base Model", "full": "CE-CDR", "no_clm": "-w/o-CLM", "no_cas": "-w/o-Cas",
          "no_att": "-w/o-Att", "no_gate": "-w/o-Gate", "with_cache": "-w/-Cache"}


@dataclass
class CausalStage:
    f: dcmm.CausalModel
    e: dcmm.PropensityModel
    trace: dcmm.TrainTrace
    r_s: np.ndarray | None = None          # per user, source history before the holdout
    r_s_events: np.ndarray | None = None   # per training target event, history before it


class Experiment:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self._world: World | None = None
        self._split = None
        self._tables = None
        self._cal = None
        self._datasets: dict = {}
        self._causal: dict = {}
        self._recs: dict = {}
        self.timings: dict = {}

    def _timed(self, name, fn):
        t = time.perf_counter()
        out = fn()
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t
        return out

    # --- data ----------------------------------------------------------------------

    @property
    def world(self) -> World:
        if self._world is None:
            self._world = self._timed("world", lambda: generate_world(self.cfg.world(self.seed)))
        return self._world

    @property
    def split(self) -> evalkit.EvalSplit:
        if self._split is None:
            self._split = evalkit.leave_one_out(self.world.log)
        return self._split

    @property
    def train(self):
        return self.split.train

    @property
    def tables(self) -> clm.Tables:
        if self._tables is None:
            c = self.cfg
            beh = self._timed("behavior", lambda: clm.train_behavior_embeddings(
                self.train, dim=c.behavior_dim, epochs=c.behavior_epochs, seed=self.seed,
                rounds=c.behavior_rounds))
            self._tables = clm.Tables(self.world.content, beh)
        return self._tables

    @property
    def calibrator(self) -> clm.SimilarityCalibrator:
        if self._cal is None:
            self._cal = clm.fit_calibrator(self.train, self.tables, M=self.cfg.calib_M, seed=self.seed)
        return self._cal

    def dataset(self, tau: float, spaces=clm.SPACES) -> clm.CausalDataset:
        key = (float(tau), tuple(spaces))
        if key not in self._datasets:
            self._datasets[key] = clm.build_dataset(self.train, self.calibrator, self.tables, tau,
                                                    L_max=self.cfg.L_max, spaces=spaces,
                                                    truth=self.world.truth)
        return self._datasets[key]

    @cached_property
    def user_features(self) -> np.ndarray:
        return dcmm.user_features(self.train, self.world.content)

    # --- models --------------------------------------------------------------------

    def causal(self, tau: float, mode: str = "plcl", spaces=clm.SPACES) -> CausalStage:
        key = (float(tau), mode, tuple(spaces))
        if key not in self._causal:
            ds = self.dataset(tau, spaces)
            tr = self.train
            feats = self.user_features
            tgt = tr.domain != 0
            f, e, trace = self._timed("dcmm", lambda: dcmm.train_dcmm(
                ds, self.world.content, self.tables.behavior, feats, tr.n_source_items,
                tr.n_target_items, self.cfg.dcmm(self.seed, mode), interacted=(tr.user[tgt], tr.item[tgt])))
            self._causal[key] = CausalStage(f, e, trace)
        return self._causal[key]

    def representations(self, stage: CausalStage) -> CausalStage:
        """Fill in the per-user and per-event ``r_s`` tables on first use."""
        if stage.r_s is None:
            feats = self.user_features
            stage.r_s = self._timed("represent", lambda: dcmm.represent_users(
                stage.f, self.train, feats, cutoff=self.split.cutoff()))
            stage.r_s_events = self._timed("represent", lambda: dcmm.represent_events(
                stage.f, self.train, feats))
        return stage

    def recommender(self, variant: str, tau: float | None = None):
        """Train (or fetch) the recommender for an ablation variant or a tau."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        tau = self.cfg.tau if tau is None else float(tau)
        if variant == "no_clm":
            tau = 0.0
        key = (variant, tau)
        if key in self._recs:
            return self._recs[key]
        if variant == "with_cache":
            # serving from a coherent cache feeds the full model identical vectors
            self._recs[key] = self.recommender("full", tau)
            return self._recs[key]
        c = self.cfg
        if variant == "base":
            cfg = c.cem(self.seed, enhanced=False)
            model, _ = self._timed("rec", lambda: cem.train_enhanced(self.train, self.world.content.target, cfg))
        else:
            stage = self.representations(self.causal(tau, "bce" if variant == "no_cas" else "plcl"))
            cfg = c.cem(self.seed, no_att=variant == "no_att", no_gate=variant == "no_gate")
            model, _ = self._timed("rec", lambda: cem.train_enhanced(
                self.train, self.world.content.target, cfg, r_s=stage.r_s,
                c=cem.consistency_features(self.train), r_s_events=stage.r_s_events))
        self._recs[key] = model
        return model

    def evaluate(self, variant: str, tau: float | None = None) -> evalkit.MetricsReport:
        model = self.recommender(variant, tau)
        scores = self.scores(model, variant)
        sampled = self.cfg.sampled_candidates or None
        return evalkit.evaluate(scores, self.split, self.cfg.K, sampled=sampled, seed=self.seed)

    def scores(self, model, variant: str) -> np.ndarray:
        users = self.split.users
        if variant == "with_cache":
            from .serving import EmbeddingCache
            stage = self.causal(self.cfg.tau)
            cache = EmbeddingCache.build(stage.f, self.train, self.user_features, cutoff=self.split.cutoff())
            return model.score_all(users, cache.lookup(users))
        return model.score_all(users)


def heatmap_for_seed(cfg: ExperimentConfig, seed: int, excluded: str = "behavior",
                     exp: Experiment | None = None) -> evalkit.Heatmap:
    """Train on labels built without one similarity space, then bin the causal
    score of every example by both calibrated similarities."""
    ex = exp if exp is not None else Experiment(cfg, seed)
    kept = tuple(sp for sp in clm.SPACES if sp != excluded)
    stage = ex.causal(cfg.tau, "plcl", spaces=kept)
    full = ex.dataset(cfg.tau)
    f = dcmm.score_dataset(stage.f, full, ex.user_features)
    return evalkit.causality_heatmap(f, full.seq_content, full.seq_behavior, excluded=excluded)


def ablation_rows(cfg: ExperimentConfig, seeds=None, variants=VARIANTS) -> list[dict]:
    rows = []
    for seed in seeds if seeds is not None else cfg.seed_list():
        ex = Experiment(cfg, seed)
        for v in variants:
            rep = ex.evaluate(v)
            rows.append({"seed": seed, "variant": v, "K": rep.K, "hr": rep.hr, "ndcg": rep.ndcg})
            log.info("seed %d %-10s HR@%d %.4f NDCG %.4f", seed, v, rep.K, rep.hr, rep.ndcg)
    return rows


def tau_rows(cfg: ExperimentConfig, seeds=None, taus=None) -> list[dict]:
    rows = []
    for seed in seeds if seeds is not None else cfg.seed_list():
        ex = Experiment(cfg, seed)
        for tau in taus if taus is not None else cfg.tau_list():
            rep = ex.evaluate("full", tau)
            rows.append({"seed": seed, "tau": float(tau), "K": rep.K, "hr": rep.hr, "ndcg": rep.ndcg})
            log.info("seed %d tau %.2f HR@%d %.4f", seed, tau, rep.K, rep.hr)
    return rows


def mean_by(rows: list[dict], key: str, metric: str = "hr") -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r[key], []).append(r[metric])
    return {k: float(np.mean(v)) for k, v in out.items()}
