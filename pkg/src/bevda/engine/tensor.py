"""Dense float64 tensors recorded on an explicit reverse-mode tape.

Operations record onto the innermost active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient.  Outside of
any tape nothing is recorded, which doubles as inference mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension (e.g. ``"channels"``).
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            arr = data if data.dtype == np.float64 and data.flags.c_contiguous \
                else np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.array(data, dtype=np.float64)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}", dim="shape")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    input_ids: tuple = ()
    # requires_grad of each input when the op was recorded
    needs_grad: tuple = ()


@dataclass
class Tape:
    """Ordered record of operations; node ``i`` only consumes outputs of nodes < i."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, kind, inputs, output, backward_fn) -> None:
        input_ids = tuple(t.node_id if t._tape is self else None for t in inputs)
        output.node_id = len(self.nodes)
        output._tape = self
        needs = tuple(t.requires_grad for t in inputs)
        self.nodes.append(Node(kind, tuple(inputs), output, backward_fn, input_ids, needs))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output.node_id = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``value`` and record it on the active tape if any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape or loss.node_id is None:
        raise TapeError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, need, gi in zip(node.inputs, node.needs_grad, node.backward(g)):
            if gi is None or not need:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is not tape:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}", dim="broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_output("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_output("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return make_output("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_output("sum", np.array(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_output("mean", np.array(a.data.mean()), (a,),
                       lambda g: (np.full(shape, float(g) / n),))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_output("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_output("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_output("take", np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_output("concat", np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), bw)


def square(a: Tensor) -> Tensor:
    d = a.data
    return make_output("square", d * d, (a,), lambda g: (2.0 * d * g,))
