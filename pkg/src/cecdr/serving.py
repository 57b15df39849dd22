"""Serving simulation: two-phase training and a real-time cache of causal representations.

During a day, source events trigger sparse-only updates (dense tensors are
excluded from the optimizer, so they stay bitwise fixed) followed by a cache
refresh; target requests read ``r_s`` from the cache. The end of the day runs
a short full retrain and rebuilds the cache.

Every cached vector is produced by :func:`represent_one`, the same per-user
forward pass (no batching, no padding) that the from-scratch recompute uses,
so coherence can be checked bitwise.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clm, dcmm, evalkit
from .gradcore import Adam, Graph, backward, load_checkpoint
from .synthworld import TARGET, InteractionLog


represent_one = dcmm.represent_one


class EmbeddingCache:
    """user -> (read-only vector, version tick).

    One writer, many readers: an entry is replaced by swapping a single
    ``(vector, version)`` tuple, so a reader sees the old or the new entry,
    never a mix.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self._entries: dict[int, tuple[np.ndarray, int]] = {}
        self._write = threading.Lock()

    def put(self, user: int, vec, version: int) -> None:
        v = np.array(vec, dtype=np.float64, copy=True)
        if v.shape != (self.dim,):
            raise ValueError(f"cache vector shape {v.shape}, expected ({self.dim},)")
        v.setflags(write=False)
        with self._write:
            self._entries[int(user)] = (v, int(version))

    def get(self, user: int) -> tuple[np.ndarray, int] | None:
        return self._entries.get(int(user))

    def version(self, user: int) -> int:
        e = self._entries.get(int(user))
        return -1 if e is None else e[1]

    def lookup(self, users) -> np.ndarray:
        """Stacked vectors; users never cached get zeros."""
        out = np.zeros((len(users), self.dim))
        for r, u in enumerate(users):
            e = self._entries.get(int(u))
            if e is not None:
                out[r] = e[0]
        return out

    def users(self) -> list[int]:
        return sorted(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def build(cls, model: dcmm.CausalModel, log_: InteractionLog, feats: np.ndarray,
              cutoff: np.ndarray | None = None, tick: int = 0) -> "EmbeddingCache":
        cache = cls(model.cfg.d)
        for u, hist in enumerate(source_histories(log_, cutoff)):
            cache.put(u, represent_one(model, feats[u], hist), tick)
        return cache

    def write_snapshot(self, path, tick: int) -> None:
        """Header ``user_count dim tick``; rows ``user version v1..vd`` as float32."""
        lines = [f"{len(self)} {self.dim} {tick}"]
        for u in self.users():
            vec, ver = self._entries[u]
            vals = " ".join(format(float(x), ".9g") for x in vec.astype(np.float32))
            lines.append(f"{u} {ver} {vals}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def read_snapshot(cls, path) -> tuple["EmbeddingCache", int]:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]
        n, dim, tick = (int(x) for x in lines[0].split())
        if len(lines) - 1 != n:
            raise ValueError(f"{path}: header says {n} users, found {len(lines) - 1}")
        cache = cls(dim)
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != dim + 2:
                raise ValueError(f"{path}: malformed row for user {parts[0]}")
            cache.put(int(parts[0]), np.array(parts[2:], dtype=np.float32).astype(np.float64), int(parts[1]))
        return cache, tick


def source_histories(log_: InteractionLog, cutoff: np.ndarray | None = None) -> list[list[int]]:
    return [[int(i) for i in h] for h in dcmm.user_source_histories(log_, cutoff)]


@dataclass
class DayReport:
    events: int = 0
    source_events: int = 0
    target_requests: int = 0
    incremental_steps: int = 0
    refreshes: int = 0
    recomputations_avoided: int = 0
    touched_rows: dict = field(default_factory=dict)
    staleness: dict = field(default_factory=dict)   # user -> source events since last refresh
    version_changes: set = field(default_factory=set)

    def row(self) -> dict:
        return {"events": self.events, "source_events": self.source_events,
                "target_requests": self.target_requests, "incremental_steps": self.incremental_steps,
                "refreshes": self.refreshes, "recomputations_avoided": self.recomputations_avoided,
                "stale_users": sum(1 for v in self.staleness.values() if v),
                "stale_events": int(sum(self.staleness.values()))}


class ServingState:
    """Models, histories and cache for one simulated deployment.

    User features are a daily batch input: they are held fixed within a day
    so that ``r_s`` depends only on the source sequence and the weights.
    """

    def __init__(self, f: dcmm.CausalModel, e: dcmm.PropensityModel, feats: np.ndarray,
                 histories: list[list[int]], target_items: list[set], cal: clm.SimilarityCalibrator,
                 tables: clm.Tables, tau: float, seed: int = 0, tick: int = 0):
        self.f, self.e = f, e
        self.feats = feats
        self.history = [list(h) for h in histories]
        self.target_items = [set(s) for s in target_items]
        self.cal, self.tables, self.tau = cal, tables, tau
        self.rng = np.random.default_rng(seed)
        self.tick = tick
        self.day_examples: dict[int, list] = {}
        self.opt_f = Adam(f.params, f.params.sparse_names(), lr=f.cfg.lr_f)
        self.opt_e = Adam(e.params, e.params.sparse_names(), lr=f.cfg.lr_e)
        self.cache = EmbeddingCache(f.cfg.d)
        self.rebuild_cache()

    @classmethod
    def from_log(cls, f, e, feats, log_: InteractionLog, cal, tables, tau, seed=0):
        tgt = [set() for _ in range(log_.n_users)]
        for u, d, i in zip(log_.user, log_.domain, log_.item):
            if d == TARGET:
                tgt[u].add(int(i))
        return cls(f, e, feats, source_histories(log_), tgt, cal, tables, tau, seed)

    def recompute(self, user: int) -> np.ndarray:
        return represent_one(self.f, self.feats[user], self.history[user])

    def rebuild_cache(self) -> None:
        for u in range(len(self.history)):
            self.cache.put(u, self.recompute(u), self.tick)

    def snapshot_state(self) -> dict:
        return {**{k: v.copy() for k, v in self.f.params.state_dict().items()},
                **{k: v.copy() for k, v in self.e.params.state_dict().items()}}

    def sparse_names(self) -> list[str]:
        return self.f.params.sparse_names() + self.e.params.sparse_names()

    def _sparse_step(self, user: int) -> dict:
        """One PLCL step on the user's labeled target events of the day; dense tensors frozen."""
        ex = self.day_examples.get(user)
        if not ex:
            return {}
        snaps = [np.asarray(s, dtype=np.int64) for s, _, _ in ex]
        offsets = np.zeros(len(snaps) + 1, dtype=np.int64)
        np.cumsum([s.size for s in snaps], out=offsets[1:])
        items, mask, lengths = dcmm.pad_snapshots(offsets, np.concatenate(snaps), np.arange(len(snaps)))
        targets = np.array([t for _, t, _ in ex])
        s = np.array([lab for _, _, lab in ex], dtype=np.float64)
        feats = np.repeat(self.feats[user][None, :], len(ex), axis=0)
        k = self.f.cfg.k
        negs = _sample_excluding(self.rng, self.f.n_target_items, self.target_items[user], (len(ex), k))
        with Graph() as gf:
            rep = self.f.represent(feats, items, lengths)
            f_pos = self.f.score(rep, targets)
            f_neg = self.f.score(rep, negs) if k else None
        with Graph() as ge:
            e_pos = self.e.score(items, mask, targets)
        h = dcmm.corrected_label(s, f_pos.data, e_pos.data)
        with gf:
            lf = dcmm.plcl_f_loss(f_pos, h, f_neg)
        with ge:
            le = dcmm.plcl_e_loss(e_pos, s, h)
        backward(gf, lf)
        backward(ge, le)
        touched = {**_moving_rows(self.opt_f), **_moving_rows(self.opt_e)}
        self.opt_f.step()
        self.opt_e.step()
        self.f.params.zero_grad()  # dense grads were computed but are never applied
        self.e.params.zero_grad()
        return touched


def _moving_rows(opt: Adam) -> dict:
    """Sparse rows the next lazy Adam step will move: gathered with a nonzero
    gradient or carrying momentum. Padding gathers get exact zero gradients."""
    out = {}
    for n in opt.names:
        p = opt.params[n]
        if not opt.params.is_sparse(n) or p.touched_rows is None:
            continue
        rows = np.unique(p.touched_rows)
        live = (p.grad[rows] != 0).any(axis=1) | (opt.state.m[n][rows] != 0).any(axis=1)
        out[n] = rows[live]
    return out


def _sample_excluding(rng, n: int, seen: set, shape) -> np.ndarray:
    out = rng.integers(0, n, size=shape)
    if len(seen) >= n:
        raise RuntimeError("user has interacted with the whole catalog")
    bad = np.isin(out, list(seen))
    while bad.any():
        out[bad] = rng.integers(0, n, size=int(bad.sum()))
        bad = np.isin(out, list(seen))
    return out


def day_stream(log_: InteractionLog, n_events: int) -> tuple[InteractionLog, InteractionLog]:
    """Split a log into (history, day): the day is the last ``n_events`` in (ts, user) order."""
    order = np.lexsort((log_.user, log_.ts))
    day_rows = order[len(order) - n_events:] if n_events else order[:0]
    mask = np.zeros(len(log_), dtype=bool)
    mask[day_rows] = True
    return log_.subset(~mask), log_.subset(mask)


@dataclass
class EventStream:
    """Events in replay order (unlike :class:`InteractionLog`, which sorts by user)."""
    user: np.ndarray
    domain: np.ndarray
    item: np.ndarray
    ts: np.ndarray

    def __len__(self) -> int:
        return int(len(self.user))


def in_time_order(log_: InteractionLog) -> EventStream:
    """Rows reordered by (ts, user), the replay order of :func:`run_day`."""
    o = np.lexsort((log_.user, log_.ts))
    return EventStream(log_.user[o], log_.domain[o], log_.item[o], log_.ts[o])


def run_day(events: EventStream, state: ServingState, refresh: bool = True,
            refresh_until: int | None = None, update: bool = True,
            end_of_day: bool = True, daily_epochs: int = 1, on_step=None) -> tuple[ServingState, DayReport]:
    """Replay ``events`` (time order: ts, then user) against ``state``.

    ``refresh_until`` stops cache refreshes after that many events (mid-day
    refresh outage); ``on_step(state, user, touched)`` runs after every
    incremental step, for coherence checks.
    """
    rep = DayReport()
    if len(events) == 0:
        return state, rep
    if not _is_time_ordered(events):
        raise ValueError("events are not in timestamp order")
    L = state.f.cfg.L_max
    n_src = state.f.n_source_items
    for j in range(len(events)):
        u, d, i = int(events.user[j]), int(events.domain[j]), int(events.item[j])
        state.tick += 1
        rep.events += 1
        refreshing = refresh and (refresh_until is None or j < refresh_until)
        if d == TARGET:
            rep.target_requests += 1
            if state.cache.get(u) is not None:
                rep.recomputations_avoided += 1
            snap = state.history[u][-L:]
            if snap:
                score, _, _ = clm._score(state.tables, state.cal, np.array([0, len(snap)]),
                                         np.asarray(snap), np.array([i]))
                state.day_examples.setdefault(u, []).append((tuple(snap), i, int(score[0] > state.tau)))
            state.target_items[u].add(i)
            continue
        rep.source_events += 1
        state.history[u].append(i)
        touched = {}
        if update:
            touched = state._sparse_step(u)
            if touched:
                rep.incremental_steps += 1
                for name, rows in touched.items():
                    prev = rep.touched_rows.get(name, np.empty(0, dtype=np.int64))
                    rep.touched_rows[name] = np.union1d(prev, rows)
        if not refreshing:
            rep.staleness[u] = rep.staleness.get(u, 0) + 1
            continue
        state.cache.put(u, state.recompute(u), state.tick)
        rep.refreshes += 1
        rep.version_changes.add(u)
        rep.staleness[u] = 0
        # other users whose snapshot reads a changed source row are recomputed
        # in place; their version (sequence state) does not advance
        rows = touched.get("f.item")
        if rows is not None and rows.size:
            src_rows = set(int(r) for r in rows if r < n_src)
            for v in range(len(state.history)):
                if v != u and src_rows.intersection(state.history[v][-L:]):
                    ver = state.cache.version(v)
                    state.cache.put(v, state.recompute(v), ver)
                    rep.refreshes += 1
        if on_step is not None:
            on_step(state, u, touched)
    if end_of_day:
        _daily_full_training(state, daily_epochs)
        state.rebuild_cache()
        state.day_examples.clear()
    return state, rep


def _is_time_ordered(events: EventStream) -> bool:
    ts, user = np.asarray(events.ts), np.asarray(events.user)
    dt = np.diff(ts)
    return bool(np.all((dt > 0) | ((dt == 0) & (np.diff(user) >= 0))))


def _daily_full_training(state: ServingState, epochs: int) -> None:
    """Short all-parameter PLCL pass over the day's labeled examples."""
    if epochs <= 0 or not state.day_examples:
        return
    f, e = state.f, state.e
    opt_f, opt_e = Adam(f.params, lr=f.cfg.lr_f), Adam(e.params, lr=f.cfg.lr_e)
    users = [u for u in sorted(state.day_examples) for _ in state.day_examples[u]]
    ex = [x for u in sorted(state.day_examples) for x in state.day_examples[u]]
    snaps = [np.asarray(s, dtype=np.int64) for s, _, _ in ex]
    offsets = np.zeros(len(ex) + 1, dtype=np.int64)
    np.cumsum([s.size for s in snaps], out=offsets[1:])
    flat = np.concatenate(snaps)
    targets = np.array([t for _, t, _ in ex])
    s_all = np.array([lab for _, _, lab in ex], dtype=np.float64)
    users = np.array(users)
    lengths = np.diff(offsets)
    for _ in range(epochs):
        for rows in dcmm.bucketed_batches(lengths, f.cfg.batch_size, state.rng):
            items, mask, lens = dcmm.pad_snapshots(offsets, flat, rows)
            negs = np.stack([_sample_excluding(state.rng, f.n_target_items, state.target_items[u], (f.cfg.k,))
                             for u in users[rows]]) if f.cfg.k else None
            with Graph() as gf:
                rep = f.represent(state.feats[users[rows]], items, lens, train=True, rng=state.rng)
                f_pos = f.score(rep, targets[rows])
                f_neg = f.score(rep, negs) if negs is not None else None
            with Graph() as ge:
                e_pos = e.score(items, mask, targets[rows])
            h = dcmm.corrected_label(s_all[rows], f_pos.data, e_pos.data)
            with gf:
                lf = dcmm.plcl_f_loss(f_pos, h, f_neg)
            with ge:
                le = dcmm.plcl_e_loss(e_pos, s_all[rows], h)
            backward(gf, lf)
            backward(ge, le)
            opt_f.step()
            opt_e.step()


# --- checks ------------------------------------------------------------------------

@dataclass
class FreezeReport:
    dense_identical: bool
    drifted: list
    changed_rows: dict

    @property
    def ok(self) -> bool:
        return self.dense_identical


def _load(obj) -> dict:
    return load_checkpoint(obj) if isinstance(obj, (str, Path)) else obj


def freeze_check(before, after, sparse_names) -> FreezeReport:
    """Compare two parameter snapshots (dicts or checkpoint paths).

    Dense tensors must be bitwise identical; for sparse tables the changed
    row ids are listed.
    """
    a, b = _load(before), _load(after)
    if set(a) != set(b):
        raise ValueError(f"tensor sets differ: {sorted(set(a) ^ set(b))}")
    drifted, changed = [], {}
    for name in sorted(a):
        x, y = np.asarray(a[name]), np.asarray(b[name])
        if x.shape != y.shape:
            drifted.append(name)
            continue
        if name in sparse_names:
            diff = np.any(x != y, axis=tuple(range(1, x.ndim))) if x.ndim > 1 else x != y
            changed[name] = np.flatnonzero(diff)
        elif x.tobytes() != y.tobytes():
            drifted.append(name)
    return FreezeReport(not drifted, drifted, changed)


@dataclass
class CacheAblation:
    cached: evalkit.MetricsReport
    fresh: evalkit.MetricsReport
    delta_hr: float
    delta_ndcg: float
    day: DayReport
    mismatched_users: int
    state: ServingState


def ablate_cache(f: dcmm.CausalModel, e: dcmm.PropensityModel, rec, split: evalkit.EvalSplit,
                 feats: np.ndarray, cal, tables, tau: float, day_events: int = 1000,
                 refresh: bool = True, refresh_until: int | None = None, K: int = 10,
                 seed: int = 0) -> CacheAblation:
    """Replay the last ``day_events`` training events, then score held-out users
    with (a) cached and (b) freshly recomputed ``r_s`` under the same weights."""
    history, day = day_stream(split.train, day_events)
    state = ServingState.from_log(f, e, feats, history, cal, tables, tau, seed)
    state, rep = run_day(in_time_order(day), state, refresh=refresh, refresh_until=refresh_until, end_of_day=False)
    users = split.users
    cached = state.cache.lookup(users)
    fresh = np.stack([state.recompute(int(u)) for u in users])
    mismatched = int(np.any(cached != fresh, axis=1).sum())
    a = evalkit.evaluate(rec.score_all(users, cached), split, K)
    b = evalkit.evaluate(rec.score_all(users, fresh), split, K)
    return CacheAblation(a, b, a.hr - b.hr, a.ndcg - b.ndcg, rep, mismatched, state)
