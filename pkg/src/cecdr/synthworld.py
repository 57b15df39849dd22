"""Synthetic two-domain worlds with planted cross-domain causation.

Users carry latent preference vectors; items carry attribute vectors grouped
by category. Source interactions follow latent affinity. Each target
interaction is, with probability ``causal_fraction``, caused by one of the
user's recent source items: the target item is drawn from that source item's
nearest target neighbours in attribute space, or (for a ``hidden`` share of
causes) from a fixed list of dissimilar partner items. Otherwise the target
item follows latent affinity alone. Ground truth is kept for verification.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1
_DOMAIN_TAG = {SOURCE: "S", TARGET: "T"}
_TAG_DOMAIN = {"S": SOURCE, "T": TARGET}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 1000
    n_source_items: int = 2000
    n_target_items: int = 2000
    latent_dim: int = 16
    causal_fraction: float = 0.5
    noise: float = 0.3
    interactions_per_user: int = 20
    seed: int = 7
    content_dim: int = 16
    n_categories: int = 20
    hidden_cause_fraction: float = 0.1
    recent_window: int = 5
    neighbors: int = 10
    hidden_partners: int = 3
    affinity_sharpness: float = 6.0
    category_spread: float = 0.7

    def validate(self) -> None:
        if not 0.0 <= self.causal_fraction <= 1.0:
            raise ConfigError(f"causal_fraction={self.causal_fraction} outside [0, 1]")
        if not 0.0 <= self.hidden_cause_fraction <= 1.0:
            raise ConfigError(f"hidden_cause_fraction={self.hidden_cause_fraction} outside [0, 1]")
        for name in ("n_users", "n_source_items", "n_target_items", "latent_dim",
                     "interactions_per_user", "content_dim", "n_categories",
                     "recent_window", "neighbors", "hidden_partners"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if 3 * self.interactions_per_user // 2 > self.n_target_items:
            raise ConfigError("target catalog too small for interactions_per_user")


@dataclass
class InteractionLog:
    """Columnar event records sorted by (user, ts). Item ids are per-domain."""

    user: np.ndarray
    domain: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    n_users: int
    n_source_items: int
    n_target_items: int
    _offsets: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.user = np.asarray(self.user, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int8)
        self.item = np.asarray(self.item, dtype=np.int64)
        self.ts = np.asarray(self.ts, dtype=np.int64)
        order = np.lexsort((self.ts, self.user))
        if not np.array_equal(order, np.arange(order.size)):
            self.user, self.domain = self.user[order], self.domain[order]
            self.item, self.ts = self.item[order], self.ts[order]

    def __len__(self) -> int:
        return int(self.user.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionLog):
            return NotImplemented
        return (self.n_users == other.n_users
                and self.n_source_items == other.n_source_items
                and self.n_target_items == other.n_target_items
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in ("user", "domain", "item", "ts")))

    @property
    def n_items(self) -> int:
        return self.n_source_items + self.n_target_items

    @property
    def offsets(self) -> np.ndarray:
        if self._offsets is None:
            self._offsets = np.searchsorted(self.user, np.arange(self.n_users + 1))
        return self._offsets

    def user_events(self, u: int) -> slice:
        return slice(int(self.offsets[u]), int(self.offsets[u + 1]))

    def global_item(self) -> np.ndarray:
        """Item index in the stacked (source rows, then target rows) space."""
        return self.item + np.where(self.domain == TARGET, self.n_source_items, 0)

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        return InteractionLog(self.user[mask], self.domain[mask], self.item[mask], self.ts[mask],
                              self.n_users, self.n_source_items, self.n_target_items)

    def validate(self) -> None:
        for u in range(self.n_users):
            sl = self.user_events(u)
            for dom in (SOURCE, TARGET):
                t = self.ts[sl][self.domain[sl] == dom]
                if np.any(np.diff(t) <= 0):
                    raise ValueError(f"user {u}: timestamps not strictly increasing in domain {dom}")
        src = self.domain == SOURCE
        if np.any((self.item[src] < 0) | (self.item[src] >= self.n_source_items)):
            raise ValueError("source item id out of range")
        if np.any((self.item[~src] < 0) | (self.item[~src] >= self.n_target_items)):
            raise ValueError("target item id out of range")


@dataclass
class GroundTruth:
    """Aligned with the target-domain records of the log, in log order."""

    user: np.ndarray
    ts: np.ndarray
    y: np.ndarray
    cause_item: np.ndarray  # source item id, -1 when y == 0
    hidden: np.ndarray      # cause drawn from the dissimilar partner list

    def lookup(self) -> dict:
        return {(int(u), int(t)): i for i, (u, t) in enumerate(zip(self.user, self.ts))}


@dataclass
class EmbeddingTable:
    """Per-domain item vectors in one space ('content' or 'behavior')."""

    space: str
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.space not in ("content", "behavior"):
            raise ValueError(f"unknown embedding space {self.space!r}")
        self.source = np.ascontiguousarray(self.source, dtype=np.float64)
        self.target = np.ascontiguousarray(self.target, dtype=np.float64)
        if self.source.shape[1] != self.target.shape[1]:
            raise ValueError("source and target vectors must share a dimension")
        if not (np.isfinite(self.source).all() and np.isfinite(self.target).all()):
            raise ValueError(f"{self.space} embeddings contain non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.source.shape[1])

    def stacked(self) -> np.ndarray:
        return np.ascontiguousarray(np.vstack([self.source, self.target]))


@dataclass
class World:
    config: WorldConfig
    log: InteractionLog
    content: EmbeddingTable
    truth: GroundTruth
    source_attr: np.ndarray
    target_attr: np.ndarray


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _item_attributes(rng, centers, n, spread):
    cats = rng.integers(0, centers.shape[0], size=n)
    z = rng.normal(size=(n, centers.shape[1])) / np.sqrt(centers.shape[1])
    return _normalize(centers[cats] + spread * z), cats


def _gumbel_order(rng, logits: np.ndarray, k: int) -> np.ndarray:
    """k draws without replacement, in draw order (Gumbel top-k)."""
    keys = logits + rng.gumbel(size=logits.shape)
    top = np.argpartition(-keys, k - 1)[:k]
    return top[np.argsort(-keys[top], kind="stable")]


def generate_world(cfg: WorldConfig | None = None) -> World:
    cfg = cfg or WorldConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    centers = _normalize(rng.normal(size=(cfg.n_categories, L)))
    src_attr, _ = _item_attributes(rng, centers, cfg.n_source_items, cfg.category_spread)
    tgt_attr, _ = _item_attributes(rng, centers, cfg.n_target_items, cfg.category_spread)

    q, _ = np.linalg.qr(rng.normal(size=(max(L, cfg.content_dim),) * 2))
    proj = q[:L, :cfg.content_dim]
    content = EmbeddingTable(
        "content",
        src_attr @ proj + cfg.noise * rng.normal(size=(cfg.n_source_items, cfg.content_dim)) / np.sqrt(cfg.content_dim),
        tgt_attr @ proj + cfg.noise * rng.normal(size=(cfg.n_target_items, cfg.content_dim)) / np.sqrt(cfg.content_dim),
    )

    cos = src_attr @ tgt_attr.T
    n_nb = min(cfg.n_target_items, max(cfg.neighbors * 5, 50))
    nb_part = np.argpartition(-cos, n_nb - 1, axis=1)[:, :n_nb]
    nb_rank = np.take_along_axis(cos, nb_part, axis=1)
    neighbors = np.take_along_axis(nb_part, np.argsort(-nb_rank, axis=1, kind="stable"), axis=1)
    # dissimilar partners: drawn from the lower half of each row's similarity
    partners = np.empty((cfg.n_source_items, cfg.hidden_partners), dtype=np.int64)
    for i in range(cfg.n_source_items):
        low = np.flatnonzero(cos[i] < np.median(cos[i]))
        partners[i] = rng.choice(low, size=cfg.hidden_partners, replace=False)

    users, domains, items, tss = [], [], [], []
    gt_user, gt_ts, gt_y, gt_cause, gt_hidden = [], [], [], [], []
    n = cfg.interactions_per_user
    lo, hi = max(2, n // 2), max(3, 3 * n // 2)
    for u in range(cfg.n_users):
        urng = np.random.default_rng([cfg.seed, u])
        c1, c2 = urng.choice(cfg.n_categories, size=2, replace=False)
        latent = _normalize(centers[c1] + 0.5 * centers[c2] + 0.3 * urng.normal(size=L) / np.sqrt(L))
        n_s = int(urng.integers(lo, hi + 1))
        n_t = int(urng.integers(lo, hi + 1))
        rest = np.array([SOURCE] * (n_s - 1) + [TARGET] * n_t, dtype=np.int8)
        stream = np.concatenate([[SOURCE], urng.permutation(rest)]).astype(np.int8)

        src_seq = _gumbel_order(urng, cfg.affinity_sharpness * (src_attr @ latent), n_s)
        tgt_logits = cfg.affinity_sharpness * (tgt_attr @ latent)
        used = np.zeros(cfg.n_target_items, dtype=bool)
        seen_src: list[int] = []
        si = 0
        for t, dom in enumerate(stream):
            users.append(u)
            domains.append(dom)
            tss.append(t)
            if dom == SOURCE:
                it = int(src_seq[si])
                si += 1
                seen_src.append(it)
                items.append(it)
                continue
            y, cause, hidden = 0, -1, False
            if seen_src and urng.random() < cfg.causal_fraction:
                y = 1
                cause = int(urng.choice(seen_src[-cfg.recent_window:]))
                pick = -1
                if urng.random() < cfg.hidden_cause_fraction:
                    free = partners[cause][~used[partners[cause]]]
                    if free.size:
                        pick, hidden = int(urng.choice(free)), True
                if pick < 0:
                    row = neighbors[cause]
                    free = row[~used[row]][:cfg.neighbors]
                    if free.size == 0:
                        order = np.argsort(-cos[cause], kind="stable")
                        free = order[~used[order]][:cfg.neighbors]
                    pick = int(urng.choice(free))
            else:
                logits = np.where(used, -np.inf, tgt_logits)
                pick = int(_gumbel_order(urng, logits, 1)[0])
            used[pick] = True
            items.append(pick)
            gt_user.append(u)
            gt_ts.append(t)
            gt_y.append(y)
            gt_cause.append(cause)
            gt_hidden.append(hidden)

    log_ = InteractionLog(np.array(users), np.array(domains), np.array(items), np.array(tss),
                          cfg.n_users, cfg.n_source_items, cfg.n_target_items)
    truth = GroundTruth(np.array(gt_user, dtype=np.int64), np.array(gt_ts, dtype=np.int64),
                        np.array(gt_y, dtype=np.int8), np.array(gt_cause, dtype=np.int64),
                        np.array(gt_hidden, dtype=bool))
    return World(cfg, log_, content, truth, src_attr, tgt_attr)


@dataclass
class DiscreteSample:
    context: np.ndarray
    y: np.ndarray
    s: np.ndarray
    n_contexts: int
    p_y: np.ndarray
    p_s_given_y1: np.ndarray


def generate_discrete_world(n_contexts: int, p_y, p_s_given_y1, n: int, seed: int) -> DiscreteSample:
    """Contexts uniform; ``y ~ Bern(p_y[k])``; ``s = y * Bern(p_s_given_y1[k])``."""
    p_y = np.broadcast_to(np.asarray(p_y, dtype=np.float64), (n_contexts,)).copy()
    p_s = np.broadcast_to(np.asarray(p_s_given_y1, dtype=np.float64), (n_contexts,)).copy()
    if ((p_y < 0) | (p_y > 1) | (p_s < 0) | (p_s > 1)).any():
        raise ConfigError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = rng.integers(0, n_contexts, size=n)
    y = (rng.random(n) < p_y[k]).astype(np.int8)
    s = (y & (rng.random(n) < p_s[k])).astype(np.int8)
    return DiscreteSample(k, y, s, n_contexts, p_y, p_s)


# --- TSV interfaces ------------------------------------------------------------------

LOG_HEADER = "user\tdomain\titem\tts"
TRUTH_HEADER = "user\tts\ty\tcause_item"


def export_log(log_: InteractionLog, path) -> None:
    rows = [LOG_HEADER]
    rows.extend(f"{u}\t{_DOMAIN_TAG[int(d)]}\t{i}\t{t}"
                for u, d, i, t in zip(log_.user, log_.domain, log_.item, log_.ts))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def import_log(path, n_users: int | None = None, n_source_items: int | None = None,
               n_target_items: int | None = None) -> InteractionLog:
    """Read the interaction TSV. Catalog sizes default to max id + 1."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path}: expected header {LOG_HEADER!r}")
    recs = [ln.split("\t") for ln in lines[1:] if ln]
    if any(len(r) != 4 for r in recs):
        raise ValueError(f"{path}: malformed row")
    user = np.array([int(r[0]) for r in recs], dtype=np.int64)
    try:
        dom = np.array([_TAG_DOMAIN[r[1]] for r in recs], dtype=np.int8)
    except KeyError as e:
        raise ValueError(f"{path}: unknown domain tag {e}") from None
    item = np.array([int(r[2]) for r in recs], dtype=np.int64)
    ts = np.array([int(r[3]) for r in recs], dtype=np.int64)

    def _size(given, mask):
        if given is not None:
            return given
        return int(item[mask].max()) + 1 if mask.any() else 0

    out = InteractionLog(user, dom, item, ts,
                         n_users if n_users is not None else (int(user.max()) + 1 if user.size else 0),
                         _size(n_source_items, dom == SOURCE),
                         _size(n_target_items, dom == TARGET))
    out.validate()
    return out


def export_ground_truth(truth: GroundTruth, path) -> None:
    rows = [TRUTH_HEADER]
    for u, t, y, c in zip(truth.user, truth.ts, truth.y, truth.cause_item):
        rows.append(f"{u}\t{t}\t{y}\t{c if y else '-'}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")


def import_ground_truth(path) -> GroundTruth:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != TRUTH_HEADER:
        raise ValueError(f"{path}: expected header {TRUTH_HEADER!r}")
    recs = [ln.split("\t") for ln in lines[1:] if ln]
    y = np.array([int(r[2]) for r in recs], dtype=np.int8)
    cause = np.array([-1 if r[3] == "-" else int(r[3]) for r in recs], dtype=np.int64)
    return GroundTruth(np.array([int(r[0]) for r in recs], dtype=np.int64),
                       np.array([int(r[1]) for r in recs], dtype=np.int64),
                       y, cause, np.zeros(len(recs), dtype=bool))


def config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
