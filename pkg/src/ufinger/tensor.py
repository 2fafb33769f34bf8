"""Dense tensors and a reverse-mode differentiation tape.

Operations in :mod:`ufinger.ops` record themselves on the tape that is active
in the current thread (see :class:`Tape`). Outside a tape context nothing is
recorded, which is how inference runs without keeping activations alive.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError, StateError

_local = threading.local()


class Tensor:
    """A numpy array plus an optional gradient buffer.

    Feature maps are rank-4 (N, C, H, W). Parameters such as biases and
    batch-norm scales are rank-1, and losses are rank-0.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; every op executed inside the block whose inputs
    need gradients is appended in execution order::

        with Tape() as tape:
            loss = ops.mse_loss(model_out, target)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False
        self._previous: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.used = False


def active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


def needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def record(
    inputs: Sequence[Tensor],
    output: Tensor,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Register ``output = f(inputs)`` on the active tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order. Nothing is recorded when no tape is active or no input
    requires gradients.
    """
    tape = active_tape()
    if tape is not None and needs_grad(*inputs):
        output.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), output, backward_fn))
    return output


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every leaf reached from ``loss``.

    Leaves are tensors that require gradients but were not produced by a
    recorded op. Each receives its total (summed) gradient, overwriting any
    previous value. Tensors listed in ``leaves`` that the loss does not depend
    on get a zero gradient.
    """
    if tape.used:
        raise StateError("backward already ran on this tape; call tape.reset() first")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.used = True

    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if key not in produced:
                found[key] = t
        # drop closures holding saved activations as soon as possible
        node.backward_fn = None

    for key, t in found.items():
        t.grad = grads[key]
    for t in leaves:
        if id(t) not in found:
            t.grad = np.zeros_like(t.data)
    tape.nodes = []
