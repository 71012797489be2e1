"""Tensors and the reverse-mode tape.

A Tensor wraps a contiguous float64 numpy array. Operations (see ops.py)
record GraphNode entries on a dynamic tape that is rebuilt on every forward
pass. ``backward`` runs a plain numeric reverse sweep and fills ``.grad`` on
leaf tensors; ``grad_tensors`` runs the same sweep but keeps the gradients on
the tape, so a gradient can itself be differentiated once more (the mechanism
the inversion attacks rely on: parameter gradients become functions of the
dummy input).

A tape and its tensors belong to one thread; independent graphs on separate
threads do not share state.
"""

import threading

import numpy as np

from .errors import UsageError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class GraphNode:
    """One recorded operation: parents, the produced tensor, and the rule
    mapping an upstream gradient to per-input gradients."""

    __slots__ = ("op_kind", "inputs", "output", "backward_fn")

    def __init__(self, op_kind, inputs, output, backward_fn=None):
        self.op_kind = op_kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float64 array with optional gradient and tape link."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar delegates to ops; scalars are wrapped as constants.
    def __add__(self, other):
        from . import ops

        return ops.add(self, ops.as_tensor(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(ops.as_tensor(other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, ops.as_tensor(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, ops.as_tensor(other))

    def __rmul__(self, other):
        from . import ops

        return ops.mul(ops.as_tensor(other), self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, ops.as_tensor(other))

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def zero_grads(params):
    """Explicitly clear accumulated gradients; nothing clears them implicitly."""
    for p in params:
        p.zero_grad()


def _topo_order(root):
    """Tensors with nodes, inputs-before-outputs, reachable from root."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.node is None or id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            if parent.node is not None and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """Numeric reverse sweep from a scalar root.

    Fills/accumulates ``.grad`` on every reachable leaf tensor that has
    requires_grad set. Gradients add up across multiple uses and across
    repeated calls until zero_grads is invoked.
    """
    if root.data.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
    if root.node is None:
        return
    order = _topo_order(root)
    upstream = {id(root): np.ones_like(root.data)}
    with no_grad():
        for t in reversed(order):
            g = upstream.pop(id(t), None)
            if g is None:
                continue
            input_grads = t.node.backward_fn(Tensor(g))
            for parent, ig in zip(t.node.inputs, input_grads):
                if ig is None:
                    continue
                arr = ig.data
                if parent.node is None:
                    if parent.requires_grad:
                        parent.grad = arr.copy() if parent.grad is None else parent.grad + arr
                else:
                    prev = upstream.get(id(parent))
                    upstream[id(parent)] = arr if prev is None else prev + arr


def grad_tensors(output, wrt):
    """Reverse sweep that keeps gradients on the tape.

    Returns one Tensor per entry of ``wrt`` (zeros if unreachable). The
    returned tensors are ordinary graph tensors, so a scalar built from them
    can be passed to ``backward`` again.
    """
    if output.data.size != 1:
        raise UsageError(f"grad_tensors requires a scalar output, got shape {output.shape}")
    from . import ops

    wanted = {id(t): i for i, t in enumerate(wrt)}
    collected = {}
    if output.node is None:
        if id(output) in wanted:
            collected[id(output)] = ops.constant(np.ones_like(output.data))
    else:
        order = _topo_order(output)
        upstream = {id(output): ops.constant(np.ones_like(output.data))}
        for t in reversed(order):
            g = upstream.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wanted:
                prev = collected.get(id(t))
                collected[id(t)] = g if prev is None else ops.add(prev, g)
            input_grads = t.node.backward_fn(g)
            for parent, ig in zip(t.node.inputs, input_grads):
                if ig is None:
                    continue
                if parent.node is None:
                    if id(parent) in wanted:
                        prev = collected.get(id(parent))
                        collected[id(parent)] = ig if prev is None else ops.add(prev, ig)
                else:
                    prev = upstream.get(id(parent))
                    upstream[id(parent)] = ig if prev is None else ops.add(prev, ig)
    results = []
    for t in wrt:
        got = collected.get(id(t))
        if got is None:
            got = ops.constant(np.zeros_like(t.data))
        results.append(got)
    return results
