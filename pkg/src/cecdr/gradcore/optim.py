"""Named parameter containers and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class ParameterStore:
    """Ordered mapping of name -> trainable tensor.

    Tables registered with ``sparse=True`` are id-indexed embedding matrices;
    everything else is a dense weight.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._sparse: set[str] = set()

    def add(self, name: str, value, sparse: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        if sparse:
            self._sparse.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def is_sparse(self, name: str) -> bool:
        return name in self._sparse

    def sparse_names(self) -> list[str]:
        return [n for n in self._params if n in self._sparse]

    def dense_names(self) -> list[str]:
        return [n for n in self._params if n not in self._sparse]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy(self) -> "ParameterStore":
        """Independent store with the same names, values and sparse flags (no grads)."""
        out = ParameterStore()
        for n, t in self._params.items():
            out.add(n, t.data, sparse=n in self._sparse)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in state.items():
            t = self._params[n]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a subset of a :class:`ParameterStore`.

    Sparse tables are updated lazily: only rows that received a gradient
    through ``gather`` move, and only their moment rows are advanced.
    """

    def __init__(self, params: ParameterStore, names=None, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = list(params.names() if names is None else names)
        for n in self.names:
            if n not in params:
                raise KeyError(f"unknown parameter {n!r}")
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for n in self.names:
            self.state.m[n] = np.zeros_like(params[n].data)
            self.state.v[n] = np.zeros_like(params[n].data)

    def step(self) -> None:
        st = self.state
        for n in self.names:
            if self.params[n].grad is None:
                raise MissingGradError(f"parameter {n!r} has no gradient")
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for n in self.names:
            p = self.params[n]
            g = p.grad
            m, v = st.m[n], st.v[n]
            if self.params.is_sparse(n):
                rows = p.touched_rows
                if rows is None or rows.size == 0:
                    p.zero_grad()
                    continue
                gr = g[rows]
                m[rows] = st.beta1 * m[rows] + (1.0 - st.beta1) * gr
                v[rows] = st.beta2 * v[rows] + (1.0 - st.beta2) * gr * gr
                p.data[rows] -= st.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + st.eps)
            else:
                m *= st.beta1
                m += (1.0 - st.beta1) * g
                v *= st.beta2
                v += (1.0 - st.beta2) * g * g
                p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.zero_grad()


def adam_step(params: ParameterStore, state: Adam) -> None:
    state.step()
