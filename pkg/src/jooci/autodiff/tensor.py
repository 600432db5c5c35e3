"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps one numpy array plus optional gradient storage.  All
differentiable operations live in :mod:`jooci.autodiff.ops`; when a ``Tape``
is active they append one node each (inputs, output, backward rule) in
execution order, so the tape is always topologically sorted.  ``backward``
walks the node list once in reverse and accumulates gradients additively
across fan-out.

Training runs in float32.  Gradient checking constructs float64 tensors;
central finite differences need the extra headroom.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (slow, tests only)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError):
    pass


class Tensor:
    """Dense n-dimensional array with optional gradient storage.

    ``grad`` is populated by :func:`backward`; it is ``None`` until a
    backward pass reaches the tensor and always matches ``data``'s shape
    afterwards.  Repeated backward passes accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar is attached by jooci.autodiff.ops at import time.


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_rule")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of executed operations.

    Ops record themselves onto the innermost active tape.  Because every
    node is appended at execution time, every node's inputs precede it.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = Tape._stack.pop()
        assert popped is self

    @staticmethod
    def active() -> Optional["Tape"]:
        return Tape._stack[-1] if Tape._stack else None

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_rule) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward_rule))
        self._produced.add(id(output))


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out within one call and
    across repeated calls (callers zero grads between optimizer steps).
    Tensors with no path to the loss are left untouched (grad stays None).
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in tape._produced:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
        return
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_rule(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            ig = np.asarray(ig, dtype=t.data.dtype)
            if id(t) in tape._produced:
                prev = grads.get(id(t))
                grads[id(t)] = ig if prev is None else prev + ig
            elif t.requires_grad:
                t.accumulate_grad(ig)
