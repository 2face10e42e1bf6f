"""Explicitly recorded op sequence with reverse-order backward traversal."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class Var:
    """A value on the tape. ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=None):
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.name or ''}{list(self.shape)})"


@dataclass
class OpNode:
    op: Any
    inputs: tuple
    output: Var
    cache: Any


class Tape:
    """Records operator applications; ``record=False`` gives a plain forward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[OpNode] = []
        self.last_cache = None

    def apply(self, op, *inputs, **attrs) -> Var:
        vals = [v.value if isinstance(v, Var) else v for v in inputs]
        out, cache = op.forward(*vals, **attrs)
        self.last_cache = cache
        var = Var(out)
        if self.record:
            self.nodes.append(OpNode(op, inputs, var, cache))
        return var

    def backward(self, output: Var, grad=None):
        if not self.record:
            raise RuntimeError("backward on a tape that did not record")
        output.grad = np.ones_like(output.value) if grad is None else grad
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.op.backward(g, node.cache)
            for inp, gi in zip(node.inputs, grads):
                if isinstance(inp, Var) and gi is not None:
                    inp.grad = gi if inp.grad is None else inp.grad + gi

    def describe(self) -> list[str]:
        return [f"{n.op.name} -> {list(n.output.shape)}" for n in self.nodes]
