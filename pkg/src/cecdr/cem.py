"""Causality enhancement: fuse a frozen causal representation into a dual-tower recommender.

The base model is a pair of MLP towers over user / item embeddings (the item
tower also sees item content). The enhanced model replaces the user vector
with a gated mix of the two rows of a length-2 self-attention over
``[r_s, r_t]``, where ``r_s`` comes from a trained causal model and is never
updated here.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dcmm import DivergenceError, NegativeSampler, _glorot, plcl_f_loss
from .gradcore import Adam, Graph, ParameterStore, Tensor, backward, ops
from .gradcore.tensor import ShapeError, as_tensor
from .synthworld import SOURCE, InteractionLog

log = logging.getLogger(__name__)

D_C = 5


@dataclass(frozen=True)
class CEMConfig:
    d: int = 32
    hidden: int = 64
    epochs: int = 20
    batch_size: int = 256
    k: int = 4
    lr: float = 3e-3
    seed: int = 0
    enhanced: bool = True   # False = base model only
    no_att: bool = False
    no_gate: bool = False


def consistency_features(log_: InteractionLog) -> np.ndarray:
    """Per user: cold flags (source, target), log1p counts, smoothed activity ratio."""
    src = log_.domain == SOURCE
    n_src = np.bincount(log_.user[src], minlength=log_.n_users).astype(np.float64)
    n_tgt = np.bincount(log_.user[~src], minlength=log_.n_users).astype(np.float64)
    return np.column_stack([n_src == 0, n_tgt == 0, np.log1p(n_src), np.log1p(n_tgt),
                            (n_src + 1.0) / (n_tgt + 1.0)]).astype(np.float64)


def cross_attention(r_s: Tensor, r_t: Tensor, wq, wk, wv) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention over the two rows ``[r_s, r_t]``.

    Accepts single vectors ``(d,)`` or batches ``(B, d)``.
    """
    r_s, r_t = as_tensor(r_s), as_tensor(r_t)
    if r_s.shape != r_t.shape:
        raise ShapeError("cross_attention", r_s.shape, r_t.shape)
    single = r_s.ndim == 1
    d = r_s.shape[-1]
    if single:
        r_s, r_t = ops.reshape(r_s, (1, d)), ops.reshape(r_t, (1, d))
    B = r_s.shape[0]
    R = ops.concat([ops.reshape(r_s, (B, 1, d)), ops.reshape(r_t, (B, 1, d))], axis=1)
    q, k, v = ops.matmul(R, wq), ops.matmul(R, wk), ops.matmul(R, wv)
    att = ops.softmax(ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d)))
    P = ops.matmul(att, v)
    p_s, p_t = ops.reshape(P[:, 0], (B, d)), ops.reshape(P[:, 1], (B, d))
    if single:
        return ops.reshape(p_s, (d,)), ops.reshape(p_t, (d,))
    return p_s, p_t


def gate(c, w1, b1, w2, b2) -> Tensor:
    """sigma(LeakyReLU(c W1 + b1) W2 + b2); ``(d_c,) -> ()`` or ``(B, d_c) -> (B, 1)``."""
    c = as_tensor(c)
    single = c.ndim == 1
    if single:
        c = ops.reshape(c, (1, c.shape[0]))
    hid = ops.leaky_relu(ops.add(ops.matmul(c, w1), b1))
    g = ops.sigmoid(ops.add(ops.matmul(hid, w2), b2))
    return ops.reshape(g, ()) if single else g


def fuse(p_s, p_t, g) -> Tensor:
    """g * p_s + (1 - g) * p_t."""
    g = as_tensor(g)
    return ops.add(ops.mul(g, p_s), ops.mul(ops.sub(1.0, g), p_t))


class Recommender:
    """Dual-tower model, optionally enhanced with the fusion head."""

    def __init__(self, n_users: int, n_items: int, item_content: np.ndarray,
                 cfg: CEMConfig = CEMConfig(), r_s: np.ndarray | None = None,
                 c: np.ndarray | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.n_users, self.n_items = n_users, n_items
        self.item_content = np.asarray(item_content, dtype=np.float64)
        d, hdim = cfg.d, cfg.hidden
        ps = self.params = ParameterStore()
        ps.add("u.emb", rng.normal(scale=0.1, size=(n_users, d)), sparse=True)
        ps.add("u.w1", _glorot(rng, d, hdim))
        ps.add("u.b1", np.zeros(hdim))
        ps.add("u.w2", _glorot(rng, hdim, d))
        ps.add("u.b2", np.zeros(d))
        ps.add("i.emb", rng.normal(scale=0.1, size=(n_items, d)), sparse=True)
        ps.add("i.w1", _glorot(rng, d + self.item_content.shape[1], hdim))
        ps.add("i.b1", np.zeros(hdim))
        ps.add("i.w2", _glorot(rng, hdim, d))
        ps.add("i.b2", np.zeros(d))
        if not cfg.enhanced:
            return
        if r_s is None or c is None:
            raise ValueError("enhanced model needs r_s and consistency features")
        self.r_s = np.asarray(r_s, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        if self.r_s.shape != (n_users, d):
            raise ShapeError("r_s table", self.r_s.shape, (n_users, d))
        if not cfg.no_att:
            # r_s norms are large; small query/key weights start the attention
            # near uniform instead of saturated, and W_v starts near identity
            ps.add("c.wq", 0.1 * _glorot(rng, d, d))
            ps.add("c.wk", 0.1 * _glorot(rng, d, d))
            ps.add("c.wv", np.eye(d) + 0.1 * _glorot(rng, d, d))
        if cfg.no_gate:
            ps.add("c.cat_w", _glorot(rng, 2 * d, d))
            ps.add("c.cat_b", np.zeros(d))
        else:
            ps.add("c.g1", _glorot(rng, self.c.shape[1], d))
            ps.add("c.g1b", np.zeros(d))
            ps.add("c.g2", _glorot(rng, d, 1))
            ps.add("c.g2b", np.zeros(1))

    def target_user(self, users: np.ndarray) -> Tensor:
        ps = self.params
        x = ops.gather(ps["u.emb"], users)
        x = ops.leaky_relu(ops.add(ops.matmul(x, ps["u.w1"]), ps["u.b1"]))
        return ops.add(ops.matmul(x, ps["u.w2"]), ps["u.b2"])

    def user(self, users: np.ndarray, r_s: np.ndarray | None = None) -> Tensor:
        """Fused user vector; ``r_s`` rows override the stored table (per-request values)."""
        r_t = self.target_user(users)
        cfg, ps = self.cfg, self.params
        if not cfg.enhanced:
            return r_t
        # frozen: no gradient flows back into the causal model
        r_s = Tensor(self.r_s[users] if r_s is None else r_s)
        if cfg.no_att:
            p_s, p_t = r_s, r_t
        else:
            p_s, p_t = cross_attention(r_s, r_t, ps["c.wq"], ps["c.wk"], ps["c.wv"])
        if cfg.no_gate:
            return ops.add(ops.matmul(ops.concat([p_s, p_t], axis=-1), ps["c.cat_w"]), ps["c.cat_b"])
        g = gate(Tensor(self.c[users]), ps["c.g1"], ps["c.g1b"], ps["c.g2"], ps["c.g2b"])
        return fuse(p_s, p_t, g)

    def gate_values(self, users: np.ndarray) -> np.ndarray:
        if not self.cfg.enhanced or self.cfg.no_gate:
            raise ValueError("model has no gate")
        ps = self.params
        return gate(Tensor(self.c[users]), ps["c.g1"], ps["c.g1b"], ps["c.g2"], ps["c.g2b"]).data[:, 0]

    def item(self, items: np.ndarray) -> Tensor:
        ps = self.params
        x = ops.concat([ops.gather(ps["i.emb"], items), Tensor(self.item_content[items])], axis=-1)
        x = ops.leaky_relu(ops.add(ops.matmul(x, ps["i.w1"]), ps["i.b1"]))
        return ops.add(ops.matmul(x, ps["i.w2"]), ps["i.b2"])

    def logits(self, users: np.ndarray, items: np.ndarray, u: Tensor | None = None) -> Tensor:
        """``items`` is ``(B,)`` or ``(B, m)``; pass ``u`` to reuse a computed user vector."""
        u = self.user(users) if u is None else u
        it = self.item(items)
        if it.ndim == 3:
            u = ops.reshape(u, (u.shape[0], 1, u.shape[1]))
        return ops.sum(ops.mul(u, it), axis=-1)

    def score_all(self, users: np.ndarray, r_s: np.ndarray | None = None) -> np.ndarray:
        """Dense ``(len(users), n_items)`` score matrix."""
        return self.user(np.asarray(users), r_s).data @ self.item(np.arange(self.n_items)).data.T


def rec_loss(model: Recommender, users, pos, negs, r_s=None) -> Tensor:
    """BCE on sigmoid(dot): interacted items are positives, sampled items negatives."""
    eps = 1e-6
    u = model.user(users, r_s)
    f_pos = ops.clip(ops.sigmoid(model.logits(users, pos, u)), eps, 1 - eps)
    f_neg = None
    if negs is not None and negs.size:
        f_neg = ops.clip(ops.sigmoid(model.logits(users, negs, u)), eps, 1 - eps)
    return plcl_f_loss(f_pos, np.ones(f_pos.shape), f_neg)


@dataclass
class RecTrace:
    loss: list = field(default_factory=list)


def train_enhanced(train_log: InteractionLog, item_content: np.ndarray, cfg: CEMConfig = CEMConfig(),
                   r_s: np.ndarray | None = None, c: np.ndarray | None = None,
                   r_s_events: np.ndarray | None = None):
    """Train on the target-domain events of ``train_log``; returns (model, trace).

    ``r_s`` is the per-user table used at serving time. ``r_s_events``, when
    given, holds the representation each training request would have been
    served with (aligned with the target rows of the log) and replaces the
    table lookup during training.
    """
    tgt = train_log.domain != SOURCE
    users, items = train_log.user[tgt], train_log.item[tgt]
    if users.size == 0:
        raise ValueError("no target-domain training interactions")
    if r_s_events is not None and r_s_events.shape[0] != users.size:
        raise ShapeError("r_s_events", r_s_events.shape, (users.size, cfg.d))
    if cfg.enhanced and c is None:
        c = consistency_features(train_log)
    model = Recommender(train_log.n_users, train_log.n_target_items, item_content, cfg, r_s, c)
    opt = Adam(model.params, lr=cfg.lr)
    sampler = NegativeSampler(train_log.n_target_items, users, items)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = RecTrace()
    for epoch in range(cfg.epochs):
        order = rng.permutation(users.size)
        total, nb = 0.0, 0
        for start in range(0, users.size, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            negs = sampler.sample(users[rows], cfg.k, rng) if cfg.k else None
            with Graph() as g:
                loss = rec_loss(model, users[rows], items[rows], negs,
                                None if r_s_events is None else r_s_events[rows])
            if not math.isfinite(loss.item()):
                raise DivergenceError("recommendation loss became non-finite")
            backward(g, loss)
            opt.step()
            total += loss.item()
            nb += 1
        trace.loss.append(total / nb)
        log.debug("cem epoch %d loss %.4f", epoch, total / nb)
    return model, trace


def write_gate_csv(model: Recommender, train_log: InteractionLog, path) -> None:
    src = train_log.domain == SOURCE
    n_src = np.bincount(train_log.user[src], minlength=train_log.n_users)
    n_tgt = np.bincount(train_log.user[~src], minlength=train_log.n_users)
    users = np.arange(train_log.n_users)
    g = model.gate_values(users)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "g", "src_count", "tgt_count"])
        for u in users:
            w.writerow([u, format(g[u], ".17g"), n_src[u], n_tgt[u]])


def export_representations(r_s: np.ndarray, path) -> None:
    lines = [f"{r_s.shape[0]} {r_s.shape[1]}"]
    lines += [f"{u} " + " ".join(format(v, ".17g") for v in row) for u, row in enumerate(r_s)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def import_representations(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 2:
            raise ValueError(f"{path}: bad header, expected 'user_count dim'")
        n, d = int(head[0]), int(head[1])
        out = np.zeros((n, d))
        seen = 0
        for line in fh:
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != d + 1:
                raise ValueError(f"{path}: row has {len(parts) - 1} values, expected {d}")
            out[int(parts[0])] = [float(v) for v in parts[1:]]
            seen += 1
    if seen != n:
        raise ValueError(f"{path}: {seen} rows, header says {n}")
    return out


def config_dict(cfg: CEMConfig) -> dict:
    return asdict(cfg)
