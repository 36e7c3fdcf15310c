"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass; applying it records a node that links the output
back to its inputs. :func:`backward` orders those nodes into a :class:`Tape`
and replays it in reverse, accumulating gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if 0 in arr.shape:
            raise ValueError(f"zero-extent dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Function | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic (elementwise; operands share a shape or one is a scalar) --
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
        return ops.mul(self, -1.0)

    def __abs__(self):
        from . import ops
        return ops.absolute(self)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    def sum(self):
        from . import ops
        return ops.sum_(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def backward(self) -> None:
        backward(self)


class Function:
    """A recorded differentiable operation.

    Subclasses implement ``forward(*arrays, **kw) -> array`` and
    ``backward(grad) -> tuple`` with one entry per tensor input (``None`` for
    inputs that need no gradient).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        with np.errstate(all="ignore"):  # overflow is reported as NonFiniteError below
            out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        _check_finite(out_data, cls.__name__)
        needs_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs_grad)
        if needs_grad:
            out._node = fn
        return out


class Tape:
    """Operations reachable from an output, in execution (topological) order."""

    def __init__(self, nodes: list[tuple[Tensor, Function]]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[tuple[Tensor, Function]] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would overflow on deep nets
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append((t, node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in reversed(node.inputs):
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``output``.

    Gradients accumulate (sum) into existing leaf ``grad`` buffers.
    """
    if output.size != 1:
        raise ValueError(f"backward() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not require grad")
    if tape is None:
        tape = Tape.record(output)

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    if output._node is None:
        _accumulate_leaf(output, grads[id(output)])
        return

    for t, node in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            _check_finite(ig, f"{type(node).__name__}.backward")
            if inp._node is None:
                _accumulate_leaf(inp, ig)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
