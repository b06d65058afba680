"""Dense tensor with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward rule; :meth:`Tensor.backward`
walks that record once in reverse topological order and then releases it.
"""

import contextlib

import numpy as np

from ..errors import GraphConsumed, NonFiniteValue, NotScalarLoss

_state = {"grad_enabled": True, "debug": False}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_debug(enabled):
    """In debug mode every op output is checked for NaN/inf."""
    _state["debug"] = bool(enabled)


@contextlib.contextmanager
def debug_mode(enabled=True):
    prev = _state["debug"]
    _state["debug"] = bool(enabled)
    try:
        yield
    finally:
        _state["debug"] = prev


def grad_enabled():
    return _state["grad_enabled"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def from_op(cls, data, parents, backward, op="custom"):
        """Build an op output.

        ``backward(grad)`` must return one gradient (or ``None``) per parent.
        Exposed so callers can define ops outside this module.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out.op = op
        needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        if _state["debug"] and not np.all(np.isfinite(data)):
            raise NonFiniteValue(f"non-finite output from {op}")
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        The graph is released as it is walked; a second call raises
        :class:`GraphConsumed`.
        """
        if self.size != 1:
            raise NotScalarLoss(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("graph already used by a previous backward()")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise GraphConsumed(f"{node.op} node was released by an earlier backward()")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
