"""Plain-text tensor container.

Layout::

    CECDR-CKPT v1
    <blank>
    name
    rank e1 e2 ...
    row-major values, one row of the last axis per line
    <blank>
    ...

Values are written with 17 significant digits so float64 round-trips exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

HEADER = "CECDR-CKPT v1"


class CheckpointFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(tensors: dict[str, np.ndarray]) -> str:
    lines = [HEADER]
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append("")
        lines.append(name)
        lines.append(" ".join([str(arr.ndim)] + [str(n) for n in arr.shape]))
        if arr.ndim == 0:
            lines.append(_fmt(arr))
        else:
            for row in arr.reshape(-1, arr.shape[-1]):
                lines.append(" ".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, np.ndarray]:
    lines = text.split("\n")
    if not lines or lines[0].strip() != HEADER:
        raise CheckpointFormatError(f"missing header {HEADER!r}")
    out: dict[str, np.ndarray] = {}
    i = 1
    n = len(lines)
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        if i + 1 >= n:
            raise CheckpointFormatError(f"{name}: truncated block")
        dims = [int(t) for t in lines[i + 1].split()]
        rank, shape = dims[0], tuple(dims[1:])
        if len(shape) != rank:
            raise CheckpointFormatError(f"{name}: rank {rank} but {len(shape)} extents")
        nrows = 1 if rank == 0 else int(np.prod(shape[:-1]))
        body = lines[i + 2:i + 2 + nrows]
        if len(body) != nrows:
            raise CheckpointFormatError(f"{name}: expected {nrows} value rows")
        vals = np.array([float(t) for row in body for t in row.split()], dtype=np.float64)
        if vals.size != max(1, int(np.prod(shape))):
            raise CheckpointFormatError(f"{name}: value count does not match shape {shape}")
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor {name!r}")
        out[name] = vals.reshape(shape)
        i += 2 + nrows
    return out


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    Path(path).write_text(dumps(tensors), encoding="utf-8", newline="\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_text(encoding="utf-8"))
