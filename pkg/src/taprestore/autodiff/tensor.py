"""Dense float64 tensor with a dynamic reverse-mode tape."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "AutodiffError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "set_check_finite",
    "check_finite_enabled",
    "finite_checks",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape (backward on an untracked or freed graph)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced at an op boundary while finite checks are on."""


_STATE = {"grad_enabled": True, "check_finite": False}


def is_grad_enabled() -> bool:
    return _STATE["grad_enabled"]


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


def set_check_finite(flag: bool) -> None:
    _STATE["check_finite"] = bool(flag)


def check_finite_enabled() -> bool:
    return _STATE["check_finite"]


@contextmanager
def finite_checks(flag: bool = True) -> Iterator[None]:
    prev = _STATE["check_finite"]
    _STATE["check_finite"] = bool(flag)
    try:
        yield
    finally:
        _STATE["check_finite"] = prev


class TapeNode:
    """One recorded op: its tag, parent tensors and the closure that maps the
    output gradient to one gradient per parent (``None`` for untracked parents)."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, parents={len(self.parents)})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_freed", "__weakref__")

    # keep numpy from hijacking reflected operators (ndarray + Tensor)
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name
        self._freed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        if data.dtype != np.float64:
            data = data.astype(np.float64)
        out.data = data
        out.grad = None
        out.name = None
        out._freed = False
        track = _STATE["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.node = TapeNode(op, parents, backward_fn) if track else None
        if _STATE["check_finite"] and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by op '{op}' (shape {data.shape})")
        return out

    # -- basic properties -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- reverse mode -----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf,
        then free the tape. Calling it twice on the same graph is an error."""
        if self._freed:
            raise AutodiffError("backward() called twice on the same graph; the tape was freed")
        if not self.requires_grad:
            raise AutodiffError("backward() on a tensor that does not track gradients")
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)

        order = _topological_order(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t.node
            if node is None:
                if t.requires_grad and g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in order:
            if t.node is not None:
                t.node = None
                t._freed = True

    # -- operator sugar (implemented in ops) ------------------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _topological_order(root: Tensor) -> list:
    # iterative DFS; each tensor appears once, parents before children
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order
