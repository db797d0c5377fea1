"""Tensor values and the define-by-run gradient tape."""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float array that can take part in a gradient tape.

    ``requires_grad`` marks a leaf whose gradient is wanted. Results of
    operations recorded on a tape carry a ``grad_node`` pointing into it;
    tensors built outside any tape never do.
    """

    __slots__ = ("data", "requires_grad", "grad_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad_node: tuple[int, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if np.isscalar(value) and like is not None:
        return Tensor(np.full(like.shape, value, dtype=dtype))
    return Tensor(value, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients
    are appended in execution order, which is already a topological order.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x.sum()
    >>> tape.gradient(y, [x])[0]
    array([1., 1., 1.], dtype=float32)
    """

    _counter = 0

    def __init__(self):
        Tape._counter += 1
        self.id = Tape._counter
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        out.requires_grad = True
        out.grad_node = (self.id, len(self.nodes))
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through the tape; returns grads keyed by ``id(tensor)``."""
        if loss.grad_node is None or loss.grad_node[0] != self.id:
            raise ValueError("loss was not recorded on this tape")
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, np.ndarray] = {}
        for out, inputs, fn in reversed(self.nodes[: loss.grad_node[1] + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                target = grads if inp.grad_node is not None else leaves
                key = id(inp)
                if key in target:
                    target[key] = target[key] + gi
                else:
                    target[key] = gi
        return leaves

    def gradient(self, loss: Tensor, sources):
        """Gradients of ``loss`` w.r.t. leaf ``sources`` (list or mapping of Tensors).

        Sources the loss does not reach get zero gradients of matching shape.
        """
        leaves = self.backward(loss)

        def pick(t: Tensor) -> np.ndarray:
            g = leaves.get(id(t))
            return np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)

        if isinstance(sources, Mapping):
            return {k: pick(t) for k, t in sources.items()}
        return [pick(t) for t in sources]


def backward(loss: Tensor, tape: Tape, params: Mapping[str, Tensor] | Iterable[Tensor]):
    """Functional form of :meth:`Tape.gradient`."""
    if not isinstance(params, Mapping):
        params = list(params)
    return tape.gradient(loss, params)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def parameters(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap a name->array mapping as leaf tensors."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}
