"""Recording machinery shared by tensor-core and nn-ops.

A :class:`Tape` is activated with ``with Tape() as tape:``. While active, each
operator whose inputs are tracked appends a :class:`Node` carrying a backward
closure. Without an active tape nothing is recorded, which is the inference
path.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

_local = threading.local()


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "index", "tape")

    def __init__(self, op: str, inputs, output, backward_fn: Callable, index: int, tape: "Tape"):
        self.tape = tape
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.index = index

    def __repr__(self) -> str:
        return f"Node({self.op}#{self.index})"


class Tape:
    """Ordered list of recorded nodes; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def is_tracked(t) -> bool:
    return t.requires_grad or t._node is not None


def record(op: str, inputs: Sequence, output, backward_fn: Callable):
    """Attach a node for ``output`` if a tape is active and any input is tracked.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    tape = active_tape()
    if tape is None or not any(is_tracked(t) for t in inputs):
        return output
    node = Node(op, inputs, output, backward_fn, len(tape.nodes), tape)
    tape.nodes.append(node)
    output._node = node
    return output
