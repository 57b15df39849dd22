"""Leave-one-out ranking metrics, calibration tables and the causality heatmap."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import kernels
from .synthworld import TARGET, InteractionLog

BUCKETS = ((1, 4), (5, 9), (10, None))


@dataclass
class EvalSplit:
    """``train`` is the log minus one held-out target event per qualifying user."""

    train: InteractionLog
    users: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    excluded: int

    def holdout_log(self) -> InteractionLog:
        t = self.train
        return InteractionLog(self.users, np.full(self.users.size, TARGET, dtype=np.int8), self.item,
                              self.ts, t.n_users, t.n_source_items, t.n_target_items)

    def cutoff(self) -> np.ndarray:
        """Per-user timestamp bound for source history (holdout ts, or +inf)."""
        out = np.full(self.train.n_users, np.iinfo(np.int64).max, dtype=np.int64)
        out[self.users] = self.ts
        return out


def leave_one_out(log_: InteractionLog) -> EvalSplit:
    """Hold out each user's latest target event; users with < 2 target events are skipped."""
    tgt = np.flatnonzero(log_.domain == TARGET)
    users_t = log_.user[tgt]
    counts = np.bincount(users_t, minlength=log_.n_users)
    # the log is sorted by (user, ts) so the last target row per user is the latest
    last = np.zeros(log_.n_users, dtype=np.int64) - 1
    last[users_t] = tgt
    qualifying = np.flatnonzero(counts >= 2)
    rows = last[qualifying]
    keep = np.ones(len(log_), dtype=bool)
    keep[rows] = False
    excluded = int(((counts > 0) & (counts < 2)).sum())
    return EvalSplit(log_.subset(keep), qualifying, log_.item[rows], log_.ts[rows], excluded)


def rank_of(scores, holdout: int, candidates=None) -> int:
    """1-based rank; ties broken by score descending, then item id ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.arange(scores.size) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if cand.shape != scores.shape:
        raise ValueError("scores and candidates differ in length")
    hit = np.flatnonzero(cand == holdout)
    if hit.size == 0:
        raise KeyError(f"holdout item {holdout} not among candidates")
    col = int(hit[0])
    return int(kernels.holdout_ranks(scores[None, :], cand, np.array([col]),
                                     np.ones((1, cand.size), dtype=np.uint8))[0])


def metrics_from_rank(rank, K: int):
    rank = np.asarray(rank)
    hit = rank <= K
    ndcg = np.where(hit, 1.0 / np.log2(rank + 1.0), 0.0)
    return hit.astype(np.float64), ndcg


def rank_metrics(scores, holdout: int, K: int, candidates=None) -> tuple[float, float]:
    hr, ndcg = metrics_from_rank(rank_of(scores, holdout, candidates), K)
    return float(hr), float(ndcg)


@dataclass
class MetricsReport:
    K: int
    hr: float
    ndcg: float
    n_users: int
    excluded: int
    buckets: dict = field(default_factory=dict)
    ranks: np.ndarray | None = None

    def row(self) -> dict:
        return {"K": self.K, "hr": self.hr, "ndcg": self.ndcg, "n_users": self.n_users,
                "excluded": self.excluded}


def train_items_mask(split: EvalSplit) -> np.ndarray:
    """``(len(split.users), n_target)`` True where the user trained on the item."""
    t = split.train
    tgt = t.domain == TARGET
    m = np.zeros((t.n_users, t.n_target_items), dtype=bool)
    m[t.user[tgt], t.item[tgt]] = True
    return m[split.users]


def evaluate(scores: np.ndarray, split: EvalSplit, K: int = 10, sampled: int | None = None,
             seed: int = 0) -> MetricsReport:
    """Rank each held-out item against the target catalog minus the user's training items.

    ``scores`` is ``(len(split.users), n_target_items)``. With ``sampled`` set,
    each user is ranked against that many random eligible negatives instead.
    """
    n_items = split.train.n_target_items
    if scores.shape != (split.users.size, n_items):
        raise ValueError(f"scores shape {scores.shape}, expected {(split.users.size, n_items)}")
    trained = train_items_mask(split)
    valid = ~trained
    valid[np.arange(split.users.size), split.item] = True
    if sampled is not None:
        rng = np.random.default_rng(seed)
        keep = np.zeros_like(valid)
        for r in range(valid.shape[0]):
            pool = np.flatnonzero(valid[r])
            pool = pool[pool != split.item[r]]
            keep[r, rng.choice(pool, size=min(sampled, pool.size), replace=False)] = True
        keep[np.arange(valid.shape[0]), split.item] = True
        valid = keep
    ranks = kernels.holdout_ranks(scores, np.arange(n_items), split.item, valid)
    hr, ndcg = metrics_from_rank(ranks, K)
    n_train = trained.sum(axis=1)
    buckets = {}
    for lo, hi in BUCKETS:
        sel = (n_train >= lo) & (n_train <= (hi if hi is not None else n_train.max()))
        name = f"{lo}-{hi}" if hi is not None else f"{lo}+"
        if sel.any():
            buckets[name] = (float(hr[sel].mean()), float(ndcg[sel].mean()), int(sel.sum()))
    return MetricsReport(K, float(hr.mean()), float(ndcg.mean()), int(split.users.size),
                         split.excluded, buckets, ranks)


# --- reports -----------------------------------------------------------------------

def write_metrics_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no metric rows")
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([format(r[c], ".17g") if isinstance(r[c], float) else r[c] for c in cols])


def markdown_table(rows: list[dict], digits: int = 4) -> str:
    cols = list(rows[0])
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        out.append("| " + " | ".join(f"{r[c]:.{digits}f}" if isinstance(r[c], float) else str(r[c])
                                     for c in cols) + " |")
    return "\n".join(out) + "\n"


def calibration_report(f_plcl, p_y, e=None, f_bce=None) -> list[dict]:
    """Per context: learned f vs p(y=1); optionally a naive-BCE f vs the biased target p*e."""
    f_plcl, p_y = np.asarray(f_plcl, dtype=np.float64), np.asarray(p_y, dtype=np.float64)
    rows = []
    for k in range(p_y.size):
        r = {"context": k, "f": float(f_plcl[k]), "p": float(p_y[k]),
             "abs_err": float(abs(f_plcl[k] - p_y[k]))}
        if f_bce is not None:
            pe = float(p_y[k] * e[k])
            r.update(f_bce=float(f_bce[k]), pe=pe, bce_err_pe=float(abs(f_bce[k] - pe)),
                     bce_err_p=float(abs(f_bce[k] - p_y[k])))
        rows.append(r)
    return rows


# --- causality heatmap -------------------------------------------------------------

@dataclass
class Heatmap:
    content_edges: np.ndarray
    behavior_edges: np.ndarray
    mean: np.ndarray          # (bins_c, bins_b), nan where empty
    count: np.ndarray
    excluded: str
    spearman: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            b = self.behavior_edges
            w.writerow(["content_lo", "content_hi"]
                       + [f"{b[j]:.4g}:{b[j + 1]:.4g}" for j in range(b.size - 1)])
            c = self.content_edges
            for i in range(c.size - 1):
                cells = ["" if np.isnan(v) else format(v, ".17g") for v in self.mean[i]]
                w.writerow([f"{c[i]:.4g}", f"{c[i + 1]:.4g}"] + cells)


def _bin(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)


def causality_heatmap(f_scores, seq_content, seq_behavior, excluded: str = "behavior",
                      bins: int = 10) -> Heatmap:
    """Mean causal score per (content, behavior) similarity cell.

    Similarities are calibrated quantiles in [0, 1]; ``bins`` equal-width bins
    per axis. ``spearman`` correlates each non-empty cell's mean with the
    bin centre on the ``excluded`` axis.
    """
    if excluded not in ("content", "behavior"):
        raise ValueError("excluded must be 'content' or 'behavior'")
    f_scores = np.asarray(f_scores, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    ic, ib = _bin(np.asarray(seq_content), edges), _bin(np.asarray(seq_behavior), edges)
    count = np.zeros((bins, bins), dtype=np.int64)
    total = np.zeros((bins, bins))
    np.add.at(count, (ic, ib), 1)
    np.add.at(total, (ic, ib), f_scores)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    centres = (edges[:-1] + edges[1:]) / 2
    ci, bi = np.nonzero(count)
    axis = centres[bi] if excluded == "behavior" else centres[ci]
    vals = mean[ci, bi]
    defined = ci.size > 2 and np.ptp(vals) > 0 and np.ptp(axis) > 0
    rho = float(spearmanr(axis, vals).statistic) if defined else math.nan
    return Heatmap(edges, edges.copy(), mean, count, excluded, rho)


def random_hit_rate(K: int, n_candidates) -> float:
    """Expected HR@K of a uniformly random ranking."""
    n = np.asarray(n_candidates, dtype=np.float64)
    return float(np.mean(np.minimum(K, n) / n))


__all__ = ["EvalSplit", "leave_one_out", "rank_of", "rank_metrics", "metrics_from_rank",
           "MetricsReport", "evaluate", "write_metrics_csv", "markdown_table",
           "calibration_report", "Heatmap", "causality_heatmap", "random_hit_rate"]
