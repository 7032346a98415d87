"""Tensor type and the reverse-mode recording graph."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from dfdnet.errors import ContractError

_state = {"dtype": np.float32, "grad_enabled": True, "check_finite": False}


def get_default_dtype() -> type:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width: {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the float width of newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Assert after every recorded forward op that its output is finite."""
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs, a vector-Jacobian product, and saved context.

    ``vjp`` maps the upstream gradient (an ndarray shaped like the output) to a
    tuple with one entry per input; ``None`` entries mean "no gradient".
    """

    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    ctx: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = get_default_dtype()
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (defined in ops; bound lazily to avoid import cycles) -----
    def __add__(self, other):
        from dfdnet.autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from dfdnet.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from dfdnet.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from dfdnet.autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from dfdnet.autodiff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from dfdnet.autodiff import ops
        return ops.div(other, self)

    def __neg__(self):
        from dfdnet.autodiff import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from dfdnet.autodiff import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from dfdnet.autodiff import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        backward(self, grad, retain_graph=retain_graph)


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or get_default_dtype())


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp, **ctx) -> Tensor:
    """Wrap an op output and, if any input needs gradient, record it in the graph."""
    out = Tensor(data, dtype=data.dtype)
    if _state["check_finite"] and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp, ctx)
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` through recorded nodes, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Visits recorded nodes in exact reverse topological order. Gradients from
    several consumers of one tensor are summed. Unless ``retain_graph`` is set,
    the graph is released afterwards.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.vjp(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            t.node = None
