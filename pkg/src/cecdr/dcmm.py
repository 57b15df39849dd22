"""Direct causality modeling: causal model f, propensity model e, and their losses.

``f`` is a small causal self-attention encoder over ``[user token, source
items...]`` whose last-position representation is dotted with a target item
embedding. ``e`` only sees item-wise products between snapshot items and the
target, max-pooled over the sequence, so it can express the similarity-driven
labeling rule but not user- or order-specific causality.

Training alternates per batch: compute f and e, form the corrected label h
under stop-gradient, step f on the h-weighted cross-entropy (plus sampled
non-interacted negatives), then step e on the h-weighted labeling likelihood.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .clm import CausalDataset, snapshots_for_targets
from .gradcore import Adam, Graph, ParameterStore, Tensor, backward, ops
from .synthworld import SOURCE, DiscreteSample, EmbeddingTable, InteractionLog

log = logging.getLogger(__name__)

EPS = 1e-6
MASK_FILL = -1e9


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DCMMConfig:
    d_id: int = 16
    d_ct: int = 16
    n_blocks: int = 2
    keep: float = 0.8
    L_max: int = 50
    e_hidden: int = 16
    epochs: int = 6
    warmup: int = 2
    batch_size: int = 256
    k: int = 4
    lr_f: float = 1e-3
    lr_e: float = 1e-3
    seed: int = 0
    mode: str = "plcl"  # "plcl" or "bce" (labels s taken as ground truth)

    @property
    def d(self) -> int:
        return self.d_id + self.d_ct


def _glorot(rng, fan_in, fan_out):
    return rng.normal(scale=math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def user_features(log_: InteractionLog, content: EmbeddingTable) -> np.ndarray:
    """log1p source count, log1p target count, mean source-content vector."""
    feats = np.zeros((log_.n_users, 2 + content.dim))
    src = log_.domain == SOURCE
    n_src = np.bincount(log_.user[src], minlength=log_.n_users)
    n_tgt = np.bincount(log_.user[~src], minlength=log_.n_users)
    feats[:, 0] = np.log1p(n_src)
    feats[:, 1] = np.log1p(n_tgt)
    sums = np.zeros((log_.n_users, content.dim))
    np.add.at(sums, log_.user[src], content.source[log_.item[src]])
    feats[:, 2:] = sums / np.maximum(n_src, 1)[:, None]
    return feats


def pad_snapshots(offsets: np.ndarray, snap: np.ndarray, rows: np.ndarray):
    """Right-padded ``(B, Lb)`` item matrix, validity mask, and lengths."""
    lengths = (offsets[rows + 1] - offsets[rows]).astype(np.int64)
    if (lengths == 0).any():
        raise ValueError("empty source snapshot in batch")
    width = int(lengths.max())
    items = np.zeros((rows.size, width), dtype=np.int64)
    mask = np.arange(width)[None, :] < lengths[:, None]
    items[mask] = np.concatenate([snap[offsets[r]:offsets[r + 1]] for r in rows])
    return items, mask, lengths


def bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator,
                     window: int = 32) -> list[np.ndarray]:
    """Shuffled batches whose members have similar snapshot lengths.

    Examples are shuffled, then sorted by length inside windows of
    ``window * batch_size`` so padding stays small; batch order is shuffled
    again so lengths do not trend through the epoch.
    """
    order = rng.permutation(lengths.size)
    span = window * batch_size
    batches = []
    for start in range(0, order.size, span):
        chunk = order[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, chunk.size, batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


class CausalModel:
    """Source-sequence encoder scoring target items.

    Item ids passed in are per-domain; they are shifted into one stacked table
    (source rows first) internally.
    """

    def __init__(self, n_source_items: int, n_target_items: int, content: EmbeddingTable,
                 n_user_features: int, cfg: DCMMConfig = DCMMConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_source_items = n_source_items
        self.n_target_items = n_target_items
        self.content = content.stacked()
        d = cfg.d
        ps = self.params = ParameterStore()
        ps.add("f.item", rng.normal(scale=0.1, size=(n_source_items + n_target_items, cfg.d_id)), sparse=True)
        ps.add("f.content_w", _glorot(rng, content.dim, cfg.d_ct))
        ps.add("f.content_b", np.zeros(cfg.d_ct))
        ps.add("f.user_w", _glorot(rng, n_user_features, d))
        ps.add("f.user_b", np.zeros(d))
        ps.add("f.pos", rng.normal(scale=0.1, size=(cfg.L_max + 1, d)))
        for b in range(cfg.n_blocks):
            for w in ("wq", "wk", "wv", "w1", "w2"):
                ps.add(f"f.b{b}.{w}", _glorot(rng, d, d))
            for bias in ("b1", "b2", "ln1_b", "ln2_b"):
                ps.add(f"f.b{b}.{bias}", np.zeros(d))
            ps.add(f"f.b{b}.ln1_g", np.ones(d))
            ps.add(f"f.b{b}.ln2_g", np.ones(d))
        ps.add("f.out_w", _glorot(rng, d, d))
        ps.add("f.out_b", np.zeros(d))

    def item_embed(self, gids: np.ndarray) -> Tensor:
        ps = self.params
        ident = ops.gather(ps["f.item"], gids)
        cont = ops.add(ops.matmul(Tensor(self.content[gids]), ps["f.content_w"]), ps["f.content_b"])
        return ops.concat([ident, cont], axis=-1)

    def encode(self, feats: np.ndarray, items: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """All positions ``(B, 1 + Lb, d)``; position 0 is the user token."""
        cfg, ps = self.cfg, self.params
        B, Lb = items.shape
        if Lb > cfg.L_max:
            raise ValueError(f"snapshot length {Lb} exceeds L_max={cfg.L_max}")
        keep = cfg.keep if train else 1.0
        user = ops.add(ops.matmul(Tensor(feats), ps["f.user_w"]), ps["f.user_b"])
        seq = ops.concat([ops.reshape(user, (B, 1, cfg.d)), self.item_embed(items)], axis=1)
        T = Lb + 1
        h = ops.add(seq, ps["f.pos"][:T])
        h = ops.dropout(h, keep, rng)
        causal = np.triu(np.full((T, T), MASK_FILL), k=1)
        scale = 1.0 / math.sqrt(cfg.d)
        for b in range(cfg.n_blocks):
            p = f"f.b{b}."
            q = ops.matmul(h, ps[p + "wq"])
            k = ops.matmul(h, ps[p + "wk"])
            v = ops.matmul(h, ps[p + "wv"])
            att = ops.softmax(ops.add(ops.scale(ops.matmul(q, ops.transpose(k)), scale), causal))
            h = ops.add(h, ops.dropout(ops.matmul(att, v), keep, rng))
            h = ops.add(ops.mul(ops.layer_norm(h), ps[p + "ln1_g"]), ps[p + "ln1_b"])
            ff = ops.leaky_relu(ops.add(ops.matmul(h, ps[p + "w1"]), ps[p + "b1"]))
            ff = ops.add(ops.matmul(ff, ps[p + "w2"]), ps[p + "b2"])
            h = ops.add(h, ops.dropout(ff, keep, rng))
            h = ops.add(ops.mul(ops.layer_norm(h), ps[p + "ln2_g"]), ps[p + "ln2_b"])
        return h

    def represent(self, feats: np.ndarray, items: np.ndarray, lengths: np.ndarray,
                  train: bool = False, rng=None) -> Tensor:
        """``r_s``: output projection of the last valid position, ``(B, d)``."""
        h = self.encode(feats, items, train, rng)
        last = h[np.arange(items.shape[0]), lengths]
        return ops.add(ops.matmul(last, self.params["f.out_w"]), self.params["f.out_b"])

    def score(self, rep: Tensor, targets: np.ndarray) -> Tensor:
        """Clamped sigmoid of rep . f_em(target); ``targets`` is ``(B,)`` or ``(B, m)``."""
        emb = self.item_embed(np.asarray(targets) + self.n_source_items)
        r = rep if emb.ndim == 2 else ops.reshape(rep, (rep.shape[0], 1, rep.shape[1]))
        logits = ops.sum(ops.mul(r, emb), axis=-1)
        return ops.clip(ops.sigmoid(logits), EPS, 1.0 - EPS)


class PropensityModel:
    """Order-free labeling model: MLP over max-pooled item-wise products."""

    def __init__(self, n_source_items: int, n_target_items: int, content: EmbeddingTable,
                 behavior: EmbeddingTable, cfg: DCMMConfig = DCMMConfig(), seed: int = 1):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_source_items = n_source_items
        self.content = content.stacked()
        self.behavior = behavior.stacked()
        d_e = cfg.d_id + 2 * cfg.d_ct
        ps = self.params = ParameterStore()
        ps.add("e.item", rng.normal(scale=0.1, size=(n_source_items + n_target_items, cfg.d_id)), sparse=True)
        ps.add("e.content_w", _glorot(rng, content.dim, cfg.d_ct))
        ps.add("e.content_b", np.zeros(cfg.d_ct))
        ps.add("e.behavior_w", _glorot(rng, behavior.dim, cfg.d_ct))
        ps.add("e.behavior_b", np.zeros(cfg.d_ct))
        ps.add("e.w1", _glorot(rng, d_e, cfg.e_hidden))
        ps.add("e.b1", np.zeros(cfg.e_hidden))
        ps.add("e.w2", _glorot(rng, cfg.e_hidden, 1))
        ps.add("e.b2", np.zeros(1))

    def item_embed(self, gids: np.ndarray) -> Tensor:
        ps = self.params
        return ops.concat([
            ops.gather(ps["e.item"], gids),
            ops.add(ops.matmul(Tensor(self.content[gids]), ps["e.content_w"]), ps["e.content_b"]),
            ops.add(ops.matmul(Tensor(self.behavior[gids]), ps["e.behavior_w"]), ps["e.behavior_b"]),
        ], axis=-1)

    def score(self, items: np.ndarray, mask: np.ndarray, targets: np.ndarray) -> Tensor:
        ps = self.params
        seq = self.item_embed(items)
        tgt = self.item_embed(np.asarray(targets)[:, None] + self.n_source_items)
        pooled = ops.max_pool(ops.mul(seq, tgt), mask)
        hid = ops.leaky_relu(ops.add(ops.matmul(pooled, ps["e.w1"]), ps["e.b1"]))
        logit = ops.add(ops.matmul(hid, ps["e.w2"]), ps["e.b2"])
        return ops.clip(ops.sigmoid(ops.reshape(logit, (items.shape[0],))), EPS, 1.0 - EPS)


def _single(snapshot) -> tuple:
    items = np.asarray(snapshot, dtype=np.int64)[None, :]
    if items.size == 0:
        raise ValueError("snapshot must be non-empty")
    return items, np.ones_like(items, dtype=bool), np.array([items.shape[1]])


def _check_ids(model, snapshot, i_t):
    snap = np.asarray(snapshot)
    if snap.size and (snap.min() < 0 or snap.max() >= model.n_source_items):
        raise KeyError(f"unknown source item in snapshot {list(snap)}")
    n_t = model.params[next(iter(model.params))].shape[0] - model.n_source_items
    if not 0 <= i_t < n_t:
        raise KeyError(f"unknown target item {i_t}")


def causal_score(model: CausalModel, feats, snapshot, i_t: int) -> float:
    _check_ids(model, snapshot, i_t)
    items, _, lengths = _single(snapshot)
    rep = model.represent(np.atleast_2d(feats), items, lengths)
    return float(model.score(rep, np.array([i_t])).data[0])


def propensity_score(model: PropensityModel, snapshot, i_t: int) -> float:
    _check_ids(model, snapshot, i_t)
    items, mask, _ = _single(snapshot)
    return float(model.score(items, mask, np.array([i_t])).data[0])


def corrected_label(s, f, e, eps: float = EPS):
    """Posterior P(y=1 | x, s): 1 when s=1, else f(1-e)/(1-fe). Plain numbers: no gradient."""
    s = np.asarray(s, dtype=np.float64)
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    e = np.asarray(e.data if isinstance(e, Tensor) else e, dtype=np.float64)
    h = f * (1.0 - e) / np.maximum(1.0 - f * e, eps)
    out = np.where(s == 1, 1.0, h)
    return float(out) if out.ndim == 0 else out


def plcl_f_loss(f_pos: Tensor | None, h, f_neg: Tensor | None = None) -> Tensor:
    """Mean h-weighted cross-entropy over interacted examples, plus the mean
    ``-log(1-f)`` over sampled non-interacted items."""
    parts = []
    if f_pos is not None and f_pos.data.size:
        h = Tensor(np.asarray(h, dtype=np.float64).reshape(f_pos.shape))
        pos = ops.add(ops.mul(h, ops.log(f_pos)),
                      ops.mul(ops.sub(1.0, h), ops.log(ops.sub(1.0, f_pos))))
        parts.append(ops.scale(ops.mean(pos), -1.0))
    if f_neg is not None and f_neg.data.size:
        parts.append(ops.scale(ops.mean(ops.log(ops.sub(1.0, f_neg))), -1.0))
    if not parts:
        raise ValueError("empty loss: no interacted examples and no negatives")
    return parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])


def plcl_e_loss(e: Tensor, s, h) -> Tensor:
    """Mean of h * [s(-log e) + (1-s)(-log(1-e))]."""
    s = Tensor(np.asarray(s, dtype=np.float64).reshape(e.shape))
    h = Tensor(np.asarray(h, dtype=np.float64).reshape(e.shape))
    ll = ops.add(ops.mul(s, ops.log(e)), ops.mul(ops.sub(1.0, s), ops.log(ops.sub(1.0, e))))
    return ops.scale(ops.mean(ops.mul(h, ll)), -1.0)


class NegativeSampler:
    """Uniform target items, rejecting anything the user interacted with."""

    def __init__(self, n_target_items: int, user: np.ndarray, item: np.ndarray):
        self.n = n_target_items
        self.seen = np.unique(np.asarray(user, dtype=np.int64) * n_target_items + np.asarray(item))

    def sample(self, users: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        out = rng.integers(0, self.n, size=(users.size, k))
        for _ in range(100):
            bad = np.isin(users[:, None] * self.n + out, self.seen)
            if not bad.any():
                return out
            out[bad] = rng.integers(0, self.n, size=int(bad.sum()))
        raise RuntimeError("negative sampling failed: users cover the whole catalog")


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "loss_f", "loss_e", "mean_h", "mean_e", "mean_f_pos", "mean_f_neg")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [format(r[c], ".17g") for c in self.COLUMNS[1:]])


def _guard(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite")


def train_dcmm(ds: CausalDataset, content: EmbeddingTable, behavior: EmbeddingTable,
               feats: np.ndarray, n_source_items: int, n_target_items: int,
               cfg: DCMMConfig = DCMMConfig(), interacted: tuple | None = None):
    """Alternating PLCL training. ``interacted`` = (user, target item) arrays
    excluded from negative sampling; defaults to the dataset's own pairs."""
    if len(ds) == 0:
        raise ValueError("empty causal dataset")
    if cfg.mode not in ("plcl", "bce"):
        raise ValueError(f"unknown training mode {cfg.mode!r}")
    rng = np.random.default_rng(cfg.seed)
    f_model = CausalModel(n_source_items, n_target_items, content, feats.shape[1], cfg, seed=cfg.seed)
    e_model = PropensityModel(n_source_items, n_target_items, content, behavior, cfg, seed=cfg.seed + 1)
    opt_f = Adam(f_model.params, lr=cfg.lr_f)
    opt_e = Adam(e_model.params, lr=cfg.lr_e)
    users, items_ = interacted if interacted is not None else (ds.user, ds.target)
    sampler = NegativeSampler(n_target_items, users, items_)
    s_all = ds.s.astype(np.float64)
    trace = TrainTrace()
    lengths_all = np.diff(ds.offsets)
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.warmup or cfg.mode == "bce"
        sums = dict(loss_f=0.0, loss_e=0.0, mean_h=0.0, mean_e=0.0, mean_f_pos=0.0, mean_f_neg=0.0)
        batches = 0
        for rows in bucketed_batches(lengths_all, cfg.batch_size, rng):
            items, mask, lengths = pad_snapshots(ds.offsets, ds.snap, rows)
            negs = sampler.sample(ds.user[rows], cfg.k, rng) if cfg.k else None
            s = s_all[rows]
            with Graph() as gf:
                rep = f_model.represent(feats[ds.user[rows]], items, lengths, train=True, rng=rng)
                f_pos = f_model.score(rep, ds.target[rows])
                f_neg = f_model.score(rep, negs) if negs is not None else None
            with Graph() as ge:
                e_pos = e_model.score(items, mask, ds.target[rows])
            h = s.copy() if warm else corrected_label(s, f_pos.data, e_pos.data)
            with gf:
                loss_f = plcl_f_loss(f_pos, h, f_neg)
            _guard(loss_f.item(), "loss_f")
            backward(gf, loss_f)
            opt_f.step()
            if not warm:
                with ge:
                    loss_e = plcl_e_loss(e_pos, s, h)
                _guard(loss_e.item(), "loss_e")
                backward(ge, loss_e)
                opt_e.step()
                sums["loss_e"] += loss_e.item()
            else:
                e_model.params.zero_grad()
            sums["loss_f"] += loss_f.item()
            sums["mean_h"] += float(h.mean())
            sums["mean_e"] += float(e_pos.data.mean())
            sums["mean_f_pos"] += float(f_pos.data.mean())
            sums["mean_f_neg"] += float(f_neg.data.mean()) if f_neg is not None else 0.0
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        trace.rows.append(row)
        log.info("dcmm epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    return f_model, e_model, trace


def represent_snapshots(model: CausalModel, users: np.ndarray, offsets: np.ndarray, snap: np.ndarray,
                        feats: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """``r_s`` for CSR snapshots (user ``users[j]``, items ``snap[offsets[j]:offsets[j+1]]``).

    Snapshots are cut to the latest ``L_max`` items; empty ones map to zero.
    """
    L = model.cfg.L_max
    n = users.size
    lengths = np.diff(offsets)
    out = np.zeros((n, model.cfg.d))
    rows = np.flatnonzero(lengths > 0)
    if rows.size == 0:
        return out
    starts = np.maximum(offsets[rows], offsets[rows + 1] - L)
    clipped = np.concatenate([snap[a:b] for a, b in zip(starts, offsets[rows + 1])])
    c_off = np.zeros(rows.size + 1, dtype=np.int64)
    np.cumsum(offsets[rows + 1] - starts, out=c_off[1:])
    # length-sorted batches keep padding small; results are written back by row
    order = np.argsort(c_off[1:] - c_off[:-1], kind="stable")
    for b in range(0, order.size, batch_size):
        idx = order[b:b + batch_size]
        items, _, lens = pad_snapshots(c_off, clipped, idx)
        out[rows[idx]] = model.represent(feats[users[rows[idx]]], items, lens).data
    return out


def score_dataset(model: CausalModel, ds: CausalDataset, feats: np.ndarray,
                  batch_size: int = 2048) -> np.ndarray:
    """Causal score f for every (snapshot, target) example of ``ds``."""
    reps = represent_snapshots(model, ds.user, ds.offsets, ds.snap, feats)
    out = np.empty(len(ds))
    for b in range(0, len(ds), batch_size):
        sl = slice(b, b + batch_size)
        out[sl] = model.score(Tensor(reps[sl]), ds.target[sl]).data
    return out


def clone(model):
    """Copy of a causal or propensity model that owns its parameters.

    Frozen inputs (content tables, config) are shared; only the store is copied.
    """
    out = copy.copy(model)
    out.params = model.params.copy()
    return out


def represent_one(model: CausalModel, feats_u: np.ndarray, history) -> np.ndarray:
    """Canonical ``r_s`` for one user: latest ``L_max`` source items, batch of one.

    Serving caches and from-scratch recomputes both go through this, so they
    agree bitwise (padding and batch width can change BLAS summation order).
    """
    items = np.asarray(history, dtype=np.int64)[-model.cfg.L_max:]
    if items.size == 0:
        return np.zeros(model.cfg.d)
    return model.represent(np.atleast_2d(feats_u), items[None, :], np.array([items.size])).data[0]


def user_source_histories(log_: InteractionLog, cutoff: np.ndarray | None = None) -> list[np.ndarray]:
    out = []
    for u in range(log_.n_users):
        sl = log_.user_events(u)
        src = log_.domain[sl] == SOURCE
        items, ts = log_.item[sl][src], log_.ts[sl][src]
        out.append(items if cutoff is None else items[ts < cutoff[u]])
    return out


def represent_users(model: CausalModel, log_: InteractionLog, feats: np.ndarray,
                    cutoff: np.ndarray | None = None) -> np.ndarray:
    """``r_s`` per user from source events strictly before ``cutoff[u]`` (or all).

    Users without source history get the zero vector.
    """
    hists = user_source_histories(log_, cutoff)
    if not hists:
        return np.zeros((0, model.cfg.d))
    return np.stack([represent_one(model, feats[u], h) for u, h in enumerate(hists)])


def represent_events(model: CausalModel, log_: InteractionLog, feats: np.ndarray,
                     batch_size: int = 512) -> np.ndarray:
    """``r_s`` as of each target event (source history strictly before it), in log order."""
    users, _, _, offsets, snap = snapshots_for_targets(log_, model.cfg.L_max)
    return represent_snapshots(model, users, offsets, snap, feats, batch_size)


# --- discrete-context fits (verification universe) ---------------------------------

@dataclass
class DiscreteFit:
    f: np.ndarray
    e: np.ndarray
    trace: list


def fit_discrete(sample: DiscreteSample, mode: str = "plcl", e_true=None, h_fixed=None,
                 steps: int = 2000, warmup: int = 200, lr: float = 0.05, seed: int = 0) -> DiscreteFit:
    """Constant-per-context f and/or e trained full-batch with the same losses.

    Modes: ``plcl`` (e supplied), ``bce`` (f on s), ``joint`` (f and e both
    learned, alternating after an f-only warm-up with h = s), ``propensity``
    (e learned with ``h_fixed`` as the corrected label).
    """
    if mode not in ("plcl", "bce", "joint", "propensity"):
        raise ValueError(f"unknown mode {mode!r}")
    K = sample.n_contexts
    ctx = sample.context
    s = sample.s.astype(np.float64)
    ps = ParameterStore()
    rng = np.random.default_rng(seed)
    ps.add("f", rng.normal(scale=0.01, size=(K, 1)))
    ps.add("e", rng.normal(scale=0.01, size=(K, 1)))
    opt_f = Adam(ps, ["f"], lr=lr)
    opt_e = Adam(ps, ["e"], lr=lr)

    def prob(name):
        return ops.clip(ops.sigmoid(ops.reshape(ops.gather(ps[name], ctx), (ctx.size,))), EPS, 1 - EPS)

    e_fixed = None if e_true is None else np.asarray(e_true, dtype=np.float64)[ctx]
    trace = []
    train_f = mode != "propensity"
    train_e = mode in ("joint", "propensity")
    for step in range(steps):
        with Graph() as gf:
            f = prob("f")
        with Graph() as ge:
            e = prob("e")
        if mode == "bce" or (mode == "joint" and step < warmup):
            h = s
        elif mode == "plcl":
            h = corrected_label(s, f.data, e_fixed)
        elif mode == "propensity":
            h = np.asarray(h_fixed, dtype=np.float64)
        else:
            h = corrected_label(s, f.data, e.data)
        if train_f:
            with gf:
                lf = plcl_f_loss(f, h)
            backward(gf, lf)
            opt_f.step()
        if train_e and not (mode == "joint" and step < warmup):
            with ge:
                le = plcl_e_loss(e, s, h)
            backward(ge, le)
            opt_e.step()
        ps.zero_grad()
        if step % 100 == 0 or step == steps - 1:
            trace.append(step)
    f_final = 1 / (1 + np.exp(-ps["f"].data[:, 0]))
    e_final = 1 / (1 + np.exp(-ps["e"].data[:, 0]))
    return DiscreteFit(np.clip(f_final, EPS, 1 - EPS), np.clip(e_final, EPS, 1 - EPS), trace)


def config_dict(cfg: DCMMConfig) -> dict:
    return asdict(cfg)
