"""Pure numpy versions of the compiled kernels (bitwise-identical results)."""
from __future__ import annotations

import numpy as np


def ecdf(sorted_samples: np.ndarray, x: np.ndarray) -> np.ndarray:
    m = float(sorted_samples.shape[0])
    return np.searchsorted(sorted_samples, x, side="right") / m


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # left-to-right accumulation, same order as the C loop
    acc = np.zeros(a.shape[0])
    for k in range(a.shape[1]):
        acc = acc + a[:, k] * b[:, k]
    return acc


def pair_dots(emb: np.ndarray, ia: np.ndarray, ib: np.ndarray) -> np.ndarray:
    return _rowdot(emb[ia], emb[ib])


def sequence_similarity(emb_c, emb_b, cal_c, cal_b, offsets, items, targets, use_c, use_b):
    n = targets.shape[0]
    lengths = np.diff(offsets)
    owner = np.repeat(np.arange(n), lengths)
    tgt = targets[owner]
    fc = ecdf(cal_c, _rowdot(emb_c[items], emb_c[tgt]))
    fb = ecdf(cal_b, _rowdot(emb_b[items], emb_b[tgt]))
    seq_c = np.zeros(n)
    seq_b = np.zeros(n)
    if items.size:
        np.maximum.at(seq_c, owner, fc)
        np.maximum.at(seq_b, owner, fb)
    fused = np.zeros(n)
    if use_c:
        fused = np.maximum(fused, seq_c)
    if use_b:
        fused = np.maximum(fused, seq_b)
    return fused, seq_c, seq_b


def holdout_ranks(scores, item_ids, holdout_col, valid):
    rows = np.arange(scores.shape[0])
    sh = scores[rows, holdout_col][:, None]
    idh = item_ids[holdout_col][:, None]
    beats = (scores > sh) | ((scores == sh) & (item_ids[None, :] < idh))
    return (beats & valid.astype(bool)).sum(axis=1).astype(np.int64) + 1
