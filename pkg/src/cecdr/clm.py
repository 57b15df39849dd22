"""Causality labeling: calibrated cross-domain similarity and the labeled dataset.

Raw similarities are dot products in a content space and a behavior space.
Each is mapped through its empirical CDF (fraction of sampled co-occurring
pairs with similarity <= x), the two calibrated values are fused by ``max``,
and a sequence scores a target item by its best-matching item. A target
interaction is labeled ``s = 1`` when that score is strictly above ``tau``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import kernels
from .gradcore import Adam, Graph, ParameterStore, backward, ops
from .synthworld import SOURCE, TARGET, EmbeddingTable, GroundTruth, InteractionLog

log = logging.getLogger(__name__)

SPACES = ("content", "behavior")


class Tables(NamedTuple):
    content: EmbeddingTable
    behavior: EmbeddingTable

    def get(self, space: str) -> EmbeddingTable:
        if space not in SPACES:
            raise KeyError(f"unknown similarity space {space!r}")
        return getattr(self, space)


class UnknownItemError(KeyError):
    pass


def _check_item(table: EmbeddingTable, i_s: int, i_t: int) -> None:
    if not 0 <= i_s < table.source.shape[0]:
        raise UnknownItemError(f"source item {i_s} missing from {table.space} table")
    if not 0 <= i_t < table.target.shape[0]:
        raise UnknownItemError(f"target item {i_t} missing from {table.space} table")


def raw_similarity(space: str, i_s: int, i_t: int, tables: Tables) -> float:
    table = tables.get(space)
    _check_item(table, i_s, i_t)
    pair = np.vstack([table.source[i_s], table.target[i_t]])
    return float(kernels.pair_dots(pair, [0], [1])[0])


@dataclass(frozen=True)
class SimilarityCalibrator:
    content: np.ndarray
    behavior: np.ndarray

    def __post_init__(self):
        for space in SPACES:
            arr = np.ascontiguousarray(getattr(self, space), dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{space} calibration sample must be a non-empty vector")
            if np.any(np.diff(arr) < 0):
                arr = np.sort(arr)
            arr.setflags(write=False)
            object.__setattr__(self, space, arr)

    def cdf(self, space: str, x) -> np.ndarray:
        return kernels.ecdf(getattr(self, space), x)

    def to_tensors(self) -> dict:
        return {"content": self.content, "behavior": self.behavior}


def cooccurring_pairs(log_: InteractionLog) -> np.ndarray:
    """Distinct (source item, target item) pairs where the source event came first."""
    codes = []
    for u in range(log_.n_users):
        sl = log_.user_events(u)
        dom, item, ts = log_.domain[sl], log_.item[sl], log_.ts[sl]
        s_mask = dom == SOURCE
        if not s_mask.any() or s_mask.all():
            continue
        s_item, s_ts = item[s_mask], ts[s_mask]
        t_item, t_ts = item[~s_mask], ts[~s_mask]
        before = s_ts[:, None] < t_ts[None, :]
        si, ti = np.nonzero(before)
        codes.append(s_item[si] * log_.n_target_items + t_item[ti])
    if not codes:
        return np.empty((0, 2), dtype=np.int64)
    uniq = np.unique(np.concatenate(codes))
    return np.stack([uniq // log_.n_target_items, uniq % log_.n_target_items], axis=1)


def _pair_similarities(table: EmbeddingTable, pairs: np.ndarray) -> np.ndarray:
    stacked = table.stacked()
    return kernels.pair_dots(stacked, pairs[:, 0], pairs[:, 1] + table.source.shape[0])


def fit_calibrator(log_: InteractionLog, tables: Tables, M: int = 10_000, seed: int = 0) -> SimilarityCalibrator:
    if M < 1000:
        raise ValueError(f"calibration sample size M={M} must be at least 1000")
    pairs = cooccurring_pairs(log_)
    if pairs.shape[0] == 0:
        raise ValueError("no co-occurring cross-domain pairs to calibrate on")
    rng = np.random.default_rng(seed)
    replace_ = pairs.shape[0] < M
    if replace_:
        warnings.warn(f"only {pairs.shape[0]} candidate pairs for M={M}; sampling with replacement",
                      RuntimeWarning, stacklevel=2)
    pick = pairs[np.sort(rng.choice(pairs.shape[0], size=M, replace=replace_))]
    return SimilarityCalibrator(np.sort(_pair_similarities(tables.content, pick)),
                                np.sort(_pair_similarities(tables.behavior, pick)))


def fused_similarity(i_s: int, i_t: int, cal: SimilarityCalibrator, tables: Tables) -> float:
    fc = cal.cdf("content", raw_similarity("content", i_s, i_t, tables))[0]
    fb = cal.cdf("behavior", raw_similarity("behavior", i_s, i_t, tables))[0]
    return float(max(fc, fb))


def sequence_similarity(snapshot, i_t: int, cal: SimilarityCalibrator, tables: Tables) -> float:
    """Best fused similarity between any snapshot item and ``i_t``; 0 when empty."""
    snapshot = np.asarray(snapshot, dtype=np.int64)
    for i_s in snapshot:
        _check_item(tables.content, int(i_s), i_t)
        _check_item(tables.behavior, int(i_s), i_t)
    fused, _, _ = _score(tables, cal, np.array([0, snapshot.size]), snapshot, np.array([i_t]))
    return float(fused[0])


def _score(tables: Tables, cal: SimilarityCalibrator, offsets, items, targets,
           spaces=SPACES):
    n_s = tables.content.source.shape[0]
    return kernels.sequence_similarity(
        tables.content.stacked(), tables.behavior.stacked(), cal.content, cal.behavior,
        offsets, items, np.asarray(targets, dtype=np.int64) + n_s,
        "content" in spaces, "behavior" in spaces)


@dataclass(frozen=True)
class CausalExample:
    user: int
    snapshot: tuple
    target: int
    s: int
    score: float
    y: int | None = None


@dataclass
class CausalDataset:
    """Columnar set of (user, source snapshot, target item) examples.

    ``offsets``/``snap`` hold snapshots CSR-style, oldest item first.
    ``seq_content``/``seq_behavior`` keep the per-space calibrated sequence
    similarities for diagnostics; ``y`` is ground truth when known.
    """

    user: np.ndarray
    ts: np.ndarray
    target: np.ndarray
    s: np.ndarray
    score: np.ndarray
    offsets: np.ndarray
    snap: np.ndarray
    tau: float
    seq_content: np.ndarray | None = None
    seq_behavior: np.ndarray | None = None
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.user.size)

    def snapshot(self, j: int) -> np.ndarray:
        return self.snap[self.offsets[j]:self.offsets[j + 1]]

    def __getitem__(self, j: int) -> CausalExample:
        return CausalExample(int(self.user[j]), tuple(int(i) for i in self.snapshot(j)),
                             int(self.target[j]), int(self.s[j]), float(self.score[j]),
                             None if self.y is None else int(self.y[j]))

    def relabel(self, tau: float) -> "CausalDataset":
        _check_tau(tau)
        return replace(self, tau=tau, s=(self.score > tau).astype(np.int8))

    def positives(self) -> set:
        return {(int(u), int(t)) for u, t, s in zip(self.user, self.ts, self.s) if s}


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau={tau} outside [0, 1)")


def snapshots_for_targets(log_: InteractionLog, L_max: int):
    """For every target event: user, ts, item and its source snapshot (CSR)."""
    users, tss, targets, lengths, chunks = [], [], [], [], []
    for u in range(log_.n_users):
        sl = log_.user_events(u)
        dom, item, ts = log_.domain[sl], log_.item[sl], log_.ts[sl]
        s_mask = dom == SOURCE
        s_item, s_ts = item[s_mask], ts[s_mask]
        t_item, t_ts = item[~s_mask], ts[~s_mask]
        n_before = np.searchsorted(s_ts, t_ts, side="left")
        for it, t, nb in zip(t_item, t_ts, n_before):
            snap = s_item[max(0, nb - L_max):nb]
            users.append(u)
            tss.append(t)
            targets.append(it)
            lengths.append(snap.size)
            chunks.append(snap)
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    snap = np.concatenate(chunks).astype(np.int64) if chunks else np.empty(0, dtype=np.int64)
    return (np.array(users, dtype=np.int64), np.array(tss, dtype=np.int64),
            np.array(targets, dtype=np.int64), offsets, snap)


def build_dataset(log_: InteractionLog, cal: SimilarityCalibrator, tables: Tables, tau: float,
                  L_max: int = 50, spaces=SPACES, truth: GroundTruth | None = None) -> CausalDataset:
    """Label every target interaction that has a non-empty source snapshot.

    ``spaces`` selects which calibrated similarities enter the fused score;
    dropping one reproduces the excluded-similarity analysis.
    """
    _check_tau(tau)
    if not spaces or any(s not in SPACES for s in spaces):
        raise ValueError(f"spaces must be a non-empty subset of {SPACES}")
    user, ts, target, offsets, snap = snapshots_for_targets(log_, L_max)
    keep = np.diff(offsets) > 0
    if not keep.all():
        lengths = np.diff(offsets)[keep]
        snap = np.concatenate([snap[offsets[j]:offsets[j + 1]] for j in np.flatnonzero(keep)]) \
            if keep.any() else np.empty(0, dtype=np.int64)
        offsets = np.zeros(lengths.size + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        user, ts, target = user[keep], ts[keep], target[keep]
    fused, seq_c, seq_b = _score(tables, cal, offsets, snap, target, spaces)
    y = None
    if truth is not None:
        idx = truth.lookup()
        y = np.array([truth.y[idx[(int(u), int(t))]] for u, t in zip(user, ts)], dtype=np.int8)
    return CausalDataset(user, ts, target, (fused > tau).astype(np.int8), fused, offsets, snap,
                         float(tau), seq_c, seq_b, y)


# --- behavior embeddings ----------------------------------------------------------

def _propagate(users: np.ndarray, items: np.ndarray, n_users: int, n_items: int,
               eu: np.ndarray, ei: np.ndarray, rounds: int) -> np.ndarray:
    """Layer-averaged symmetric-normalized propagation over the bipartite graph."""
    if rounds == 0:
        return ei
    adj = sp.csr_matrix((np.ones(users.size), (users, items)), shape=(n_users, n_items))
    adj.data[:] = 1.0  # collapse duplicate edges
    du = np.asarray(adj.sum(axis=1)).ravel()
    di = np.asarray(adj.sum(axis=0)).ravel()
    inv_u = np.where(du > 0, 1.0 / np.sqrt(np.maximum(du, 1)), 0.0)
    inv_i = np.where(di > 0, 1.0 / np.sqrt(np.maximum(di, 1)), 0.0)
    norm = sp.diags(inv_u) @ adj @ sp.diags(inv_i)
    layers_i, cur_u, cur_i = [ei], eu, ei
    for _ in range(rounds):
        cur_u, cur_i = norm @ cur_i, norm.T @ cur_u
        layers_i.append(cur_i)
    return np.mean(layers_i, axis=0)


def train_behavior_embeddings(log_: InteractionLog, dim: int = 16, epochs: int = 10, seed: int = 0,
                              rounds: int = 2, lr: float = 0.01, batch_size: int = 1024,
                              reg: float = 1e-4) -> EmbeddingTable:
    """Pairwise-ranking id embeddings on the merged graph, then neighbour averaging.

    Negatives are drawn uniformly from the positive's own domain.
    """
    if len(log_) == 0:
        raise ValueError("cannot train behavior embeddings on an empty log")
    rng = np.random.default_rng(seed)
    gid = log_.global_item()
    n_items = log_.n_items
    ps = ParameterStore()
    ps.add("user", rng.normal(scale=0.1, size=(log_.n_users, dim)), sparse=True)
    ps.add("item", rng.normal(scale=0.1, size=(n_items, dim)), sparse=True)
    opt = Adam(ps, lr=lr)
    n = gid.size
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            u, pos = log_.user[b], gid[b]
            is_t = log_.domain[b] == TARGET
            neg = np.where(is_t,
                           log_.n_source_items + rng.integers(0, log_.n_target_items, size=b.size),
                           rng.integers(0, log_.n_source_items, size=b.size))
            with Graph() as g:
                eu = ops.gather(ps["user"], u)
                ep = ops.gather(ps["item"], pos)
                en = ops.gather(ps["item"], neg)
                margin = ops.sum(ops.mul(eu, ops.sub(ep, en)), axis=-1)
                fit = ops.mean(ops.log(ops.clip(ops.sigmoid(margin), 1e-12, 1.0)))
                l2 = ops.add(ops.add(ops.sum(ops.mul(eu, eu)), ops.sum(ops.mul(ep, ep))),
                             ops.sum(ops.mul(en, en)))
                loss = ops.sub(ops.scale(l2, reg / b.size), fit)
            backward(g, loss)
            opt.step()
    items = _propagate(log_.user, gid, log_.n_users, n_items,
                       ps["user"].data, ps["item"].data, rounds)
    return EmbeddingTable("behavior", items[:log_.n_source_items], items[log_.n_source_items:])


# --- file interfaces ----------------------------------------------------------------

def export_embeddings(table: EmbeddingTable, path) -> None:
    """Header ``item_count dim space``; rows ``S<id>``/``T<id>`` then values."""
    rows = [f"{table.source.shape[0] + table.target.shape[0]} {table.dim} {table.space}"]
    for tag, mat in (("S", table.source), ("T", table.target)):
        rows.extend(f"{tag}{i} " + " ".join(format(v, ".17g") for v in vec) for i, vec in enumerate(mat))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def import_embeddings(path) -> EmbeddingTable:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]
    count, dim, space = lines[0].split()
    count, dim = int(count), int(dim)
    if len(lines) - 1 != count:
        raise ValueError(f"{path}: header says {count} items, found {len(lines) - 1}")
    rows = {"S": {}, "T": {}}
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != dim + 1 or parts[0][:1] not in rows:
            raise ValueError(f"{path}: malformed row {parts[0]!r}")
        rows[parts[0][0]][int(parts[0][1:])] = [float(v) for v in parts[1:]]

    def _mat(d):
        if sorted(d) != list(range(len(d))):
            raise ValueError(f"{path}: item ids must be dense from 0")
        return np.array([d[i] for i in range(len(d))], dtype=np.float64).reshape(len(d), dim)

    return EmbeddingTable(space, _mat(rows["S"]), _mat(rows["T"]))


DATASET_HEADER = "user\ttarget_item\ts\tscore\tsnapshot"


def export_dataset(ds: CausalDataset, path) -> None:
    rows = [DATASET_HEADER]
    for j in range(len(ds)):
        snap = ",".join(str(int(i)) for i in ds.snapshot(j))
        rows.append(f"{ds.user[j]}\t{ds.target[j]}\t{ds.s[j]}\t{format(ds.score[j], '.17g')}\t{snap}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def import_dataset(path, tau: float = float("nan")) -> CausalDataset:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != DATASET_HEADER:
        raise ValueError(f"{path}: expected header {DATASET_HEADER!r}")
    recs = [ln.split("\t") for ln in lines[1:] if ln]
    snaps = [np.array([int(x) for x in r[4].split(",") if x], dtype=np.int64) for r in recs]
    offsets = np.zeros(len(recs) + 1, dtype=np.int64)
    np.cumsum([s.size for s in snaps], out=offsets[1:])
    return CausalDataset(
        user=np.array([int(r[0]) for r in recs], dtype=np.int64),
        ts=np.full(len(recs), -1, dtype=np.int64),
        target=np.array([int(r[1]) for r in recs], dtype=np.int64),
        s=np.array([int(r[2]) for r in recs], dtype=np.int8),
        score=np.array([float(r[3]) for r in recs]),
        offsets=offsets,
        snap=np.concatenate(snaps) if snaps else np.empty(0, dtype=np.int64),
        tau=tau,
    )
