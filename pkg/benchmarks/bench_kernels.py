"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Each kernel runs on the same inputs under both backends; outputs are checked
for bitwise equality before timings are reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cecdr import kernels


def make_inputs(scale: float = 1.0, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    n_items, dim = 4000, 32
    n_pairs = int(200_000 * scale)
    n_ex, L = int(20_000 * scale), 20
    n_users, n_cand = int(2000 * scale), 2000

    emb_c = rng.normal(size=(n_items, dim))
    emb_b = rng.normal(size=(n_items, dim))
    cal_c = np.sort(rng.normal(size=5000) * 4)
    cal_b = np.sort(rng.normal(size=5000) * 4)
    lengths = rng.integers(0, L + 1, n_ex)
    offsets = np.r_[0, np.cumsum(lengths)]
    # ties on purpose so the id tie-break path is exercised
    scores = np.round(rng.normal(size=(n_users, n_cand)), 2)
    return {
        "ecdf": (cal_c, rng.normal(size=n_pairs) * 4),
        "pair_dots": (emb_c, rng.integers(0, n_items, n_pairs), rng.integers(0, n_items, n_pairs)),
        "sequence_similarity": (emb_c, emb_b, cal_c, cal_b, offsets,
                                rng.integers(0, n_items, offsets[-1]), rng.integers(0, n_items, n_ex)),
        "holdout_ranks": (scores, np.arange(n_cand), rng.integers(0, n_cand, n_users),
                          rng.random((n_users, n_cand)) > 0.05),
    }


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def run_one(name: str, args: tuple, repeat: int) -> tuple[float, tuple]:
    fn = getattr(kernels, name)
    out = fn(*args)   # warm-up, also the value we compare
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, _as_tuple(out)


def bench(repeat: int = 5, scale: float = 1.0) -> list[dict]:
    backends = kernels.available_backends()
    inputs = make_inputs(scale)
    rows = []
    prev = kernels.BACKEND
    try:
        for name, args in inputs.items():
            row = {"kernel": name}
            outs = {}
            for b in backends:
                kernels.use_backend(b)
                row[b], outs[b] = run_one(name, args, repeat)
            ref = outs[backends[0]]
            row["identical"] = all(
                all(x.tobytes() == y.tobytes() for x, y in zip(ref, o)) for o in outs.values())
            rows.append(row)
    finally:
        kernels.use_backend(prev)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    a = ap.parse_args(argv)
    rows = bench(a.repeat, a.scale)
    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled backend not built; timing the numpy fallback only")
    head = f"{'kernel':<22}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}"
    print(head + f"{'identical':>11}")
    for r in rows:
        line = f"{r['kernel']:<22}" + "".join(f"{1e3 * r[b]:>16.2f}" for b in backends)
        if len(backends) == 2:
            line += f"{r['python'] / r['compiled']:>9.1f}x"
        print(line + f"{str(r['identical']):>11}")
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
