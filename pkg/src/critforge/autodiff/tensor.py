"""Dense tensor with a reverse-mode tape.

A ``Tensor`` wraps a C-contiguous numpy array. Operations in
:mod:`critforge.autodiff.ops` return new tensors that remember their parents
and a closure mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar loss walks that graph in reverse
topological order and accumulates ``grad`` on every tensor that requires it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}")
        return np.dtype(PRECISIONS[precision])
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "float64" if self.data.dtype == np.float64 else "float32"

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, {self.precision}{tag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Backpropagate from this tensor into every reachable leaf.

        Without an explicit ``grad`` the tensor must hold one element and is
        seeded with 1. Gradients add into existing ``.grad`` slots, so callers
        clear them between steps.
        """
        if not self._parents:
            raise RuntimeError("backward() called on a tensor with no recorded forward pass")
        if grad is None:
            if self.size != 1:
                raise ValueError("implicit backward() seed needs a single-element output")
            grad = np.ones(self.shape, dtype=self.dtype)
        order = _topological(self)
        pending = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _topological(root: Tensor) -> list:
    # iterative DFS; deep graphs would overflow recursion
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    live = tuple(parents)
    if any(_needs_grad(p) for p in live):
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def check_precision(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed precision in one graph: {dt} vs {t.dtype}")
    return dt
