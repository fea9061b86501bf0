"""Named parameter collections and the Adam update."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Tuple

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered mapping of parameter name to leaf ``Tensor`` plus Adam state."""

    def __init__(self, params: Dict[str, np.ndarray] | None = None, dtype=None):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0
        for name, arr in (params or {}).items():
            self.add(name, arr, dtype=dtype)

    def add(self, name: str, arr: np.ndarray, dtype=None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(arr, dtype=dtype, copy=True), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for n, t in self.params.items()
        }

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def restore(self, values: Dict[str, np.ndarray]):
        for n, t in self.params.items():
            np.copyto(t.data, values[n])

    def astype(self, dtype) -> "ParamSet":
        """Copy of the parameters (and Adam moments) in another precision."""
        out = ParamSet()
        for n, t in self.params.items():
            out.add(n, t.data, dtype=dtype)
            out.m[n] = self.m[n].astype(dtype)
            out.v[n] = self.v[n].astype(dtype)
        out.step = self.step
        return out


def adam_step(
    params: ParamSet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """Apply one bias-corrected Adam update in place and return ``params``.

    Parameters without a gradient are treated as having a zero gradient.
    Gradients are left in place; the caller clears them.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for name, b in (("beta1", beta1), ("beta2", beta2)):
        if not 0.0 <= b < 1.0:
            raise ValueError(f"{name} must be in [0, 1), got {b}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m, v = params.m[name], params.v[name]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        p.data -= (lr / c1) * m / denom
    return params
