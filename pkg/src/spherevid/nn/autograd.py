"""Dynamic tape for reverse-mode differentiation at layer granularity.

Each recorded node is one whole layer call (a convolution, a batch norm, a
residual sum, the loss head). Nodes are appended in execution order, which
is already a topological order, so backward is a single reverse sweep.
Nothing is recorded unless a :class:`Tape` is active, which keeps inference
free of saved activations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError

_active = threading.local()


class Parameter:
    """A trainable array and its accumulated gradient."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad: np.ndarray | None = None
        self.name = name

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {self.name} {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.value.shape})"


class Var:
    """An activation flowing through the network."""

    __slots__ = ("value", "requires_grad", "__weakref__")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.stack.pop()

    def backward(self, root: Var, grad: np.ndarray | float = 1.0) -> dict[int, np.ndarray]:
        """Propagate ``grad`` from ``root`` through every recorded node once.

        Returns the gradients of all tape-visible variables keyed by ``id``;
        parameter gradients are accumulated on the parameters themselves.
        """
        grads: dict[int, np.ndarray] = {
            id(root): np.broadcast_to(np.asarray(grad, dtype=root.value.dtype), root.shape).copy()
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for var, gi in zip(node.inputs, in_grads):
                if gi is None or not var.requires_grad:
                    continue
                key = id(var)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            grads[id(node.output)] = g  # leave visible for callers inspecting intermediates
        return grads


def active_tape() -> Tape | None:
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Var], out: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
           has_params: bool = False) -> Var:
    """Wrap ``out`` and, if a tape is active and anything needs a gradient,
    append a node."""
    tape = active_tape()
    needs = has_params or any(v.requires_grad for v in inputs)
    result = Var(out, requires_grad=tape is not None and needs)
    if result.requires_grad:
        tape.nodes.append(TapeNode(op, tuple(inputs), result, backward))
    return result


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return record("add", (a, b), a.value + b.value, lambda g: (g, g))


def concat_channels(a: Var, b: Var) -> Var:
    ca = a.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))
