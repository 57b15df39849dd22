"""Hot loops behind a single interface.

The Cython extension ``_core`` is used when it has been built; otherwise the
numpy implementation in ``_fallback`` is selected at import. Both produce
bitwise-identical outputs, so the choice never changes labels or digests.
"""
from __future__ import annotations

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_IMPLS = {"python": _fallback}
if _core is not None:
    _IMPLS["compiled"] = _core

BACKEND = "compiled" if _core is not None else "python"
_impl = _IMPLS[BACKEND]


def available_backends() -> list[str]:
    return sorted(_IMPLS)


def use_backend(name: str) -> str:
    """Switch implementation; returns the previous backend name."""
    global BACKEND, _impl
    if name not in _IMPLS:
        raise ValueError(f"backend {name!r} unavailable (have {available_backends()})")
    prev = BACKEND
    BACKEND, _impl = name, _IMPLS[name]
    return prev


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.int64)


def ecdf(sorted_samples, x) -> np.ndarray:
    """Right-continuous empirical CDF: fraction of samples <= x."""
    return _impl.ecdf(_f64(sorted_samples), _f64(np.atleast_1d(x)))


def pair_dots(emb, ia, ib) -> np.ndarray:
    return _impl.pair_dots(_f64(emb), _i64(ia), _i64(ib))


def sequence_similarity(emb_c, emb_b, cal_c, cal_b, offsets, items, targets,
                        use_c: bool = True, use_b: bool = True):
    """Per example: max over snapshot items of the calibrated similarity.

    Returns ``(fused, seq_content, seq_behavior)``; empty snapshots give 0.
    """
    return _impl.sequence_similarity(
        _f64(emb_c), _f64(emb_b), _f64(cal_c), _f64(cal_b),
        _i64(offsets), _i64(items), _i64(targets), bool(use_c), bool(use_b))


def holdout_ranks(scores, item_ids, holdout_col, valid) -> np.ndarray:
    """1-based rank of each row's holdout; ties broken by ascending item id."""
    return _impl.holdout_ranks(_f64(scores), _i64(item_ids), _i64(holdout_col),
                               np.ascontiguousarray(valid, dtype=np.uint8))
