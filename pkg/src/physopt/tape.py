"""A small array-level reverse-mode tape.

Every op appends its output node to the active :class:`Tape`; nodes are
therefore stored in a valid topological order and :meth:`Tape.backward`
simply replays them in reverse, accumulating adjoints.  Plain numpy arrays
passed to an op are treated as constants.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatchError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Var:
    __slots__ = ("value", "grad", "_backward", "name")

    def __init__(self, value, backward=None, name=None):
        self.value = value
        self.grad = None
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.name or ''} shape={self.shape})"


class Tape:
    """Records nodes of one forward pass and replays adjoints."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self._owned = set()  # ids of adjoint buffers safe to update in place

    def leaf(self, value, name):
        v = Var(np.asarray(value, dtype=float), name=name)
        self.nodes.append(v)
        self.leaves[name] = v
        return v

    def _push(self, value, backward):
        v = Var(value, backward)
        self.nodes.append(v)
        return v

    def backward(self, output: Var, upstream=1.0):
        """Fill ``.grad`` of every node reachable backwards from ``output``."""
        for node in self.nodes:
            node.grad = None
        self._owned.clear()
        output.grad = np.broadcast_to(np.asarray(upstream, dtype=float), output.shape).copy()
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def grad_of(self, name):
        leaf = self.leaves[name]
        return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad

    # ---------------------------------------------------------------- ops

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        out = av + bv

        def bw(g):
            _acc(a, _unbroadcast(g, np.shape(av)))
            _acc(b, _unbroadcast(g, np.shape(bv)))

        return self._push(out, bw)

    def sub(self, a, b):
        av, bv = _val(a), _val(b)

        def bw(g):
            _acc(a, _unbroadcast(g, np.shape(av)))
            _acc(b, -_unbroadcast(g, np.shape(bv)))

        return self._push(av - bv, bw)

    def mul(self, a, b):
        av, bv = _val(a), _val(b)

        def bw(g):
            if isinstance(a, Var):
                _acc(a, _unbroadcast(g * bv, np.shape(av)))
            if isinstance(b, Var):
                _acc(b, _unbroadcast(g * av, np.shape(bv)))

        return self._push(av * bv, bw)

    def scale(self, a, c):
        return self._push(_val(a) * c, lambda g: _acc(a, g * c))

    def einsum(self, subscripts, a, b):
        """Two-operand einsum; every operand index must appear elsewhere."""
        ins, out_sub = subscripts.replace(" ", "").split("->")
        sa, sb = ins.split(",")
        av, bv = _val(a), _val(b)

        def bw(g):
            if isinstance(a, Var):
                _acc(a, np.einsum(f"{out_sub},{sb}->{sa}", g, bv))
            if isinstance(b, Var):
                _acc(b, np.einsum(f"{out_sub},{sa}->{sb}", g, av))

        return self._push(np.einsum(subscripts, av, bv), bw)

    def matmul(self, a, b):
        av, bv = _val(a), _val(b)

        def bw(g):
            if isinstance(a, Var):
                if av.ndim == 2 and bv.ndim == 3:
                    # shared weight applied over a batch: contract batch and columns
                    ga = np.tensordot(g, bv, axes=([0, 2], [0, 2]))
                elif bv.ndim > 1:
                    ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
                else:
                    ga = np.multiply.outer(g, bv)
                _acc(a, ga)
            if isinstance(b, Var):
                gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
                _acc(b, _unbroadcast(gb, bv.shape))

        return self._push(av @ bv, bw)

    def gelu(self, a):
        x = _val(a)
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return self._push(x * cdf, lambda g: _acc(a, g * (cdf + x * pdf)))

    def asinh(self, a):
        x = _val(a)
        return self._push(np.arcsinh(x), lambda g: _acc(a, g / np.sqrt(1.0 + x * x)))

    def reshape(self, a, shape):
        old = np.shape(_val(a))
        return self._push(np.reshape(_val(a), shape), lambda g: _acc(a, np.reshape(g, old)))

    def transpose(self, a, axes):
        inv = np.argsort(axes)
        return self._push(np.transpose(_val(a), axes), lambda g: _acc(a, np.transpose(g, inv)))

    def concat(self, parts, axis):
        vals = [_val(p) for p in parts]
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def bw(g):
            for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
                _acc(p, gp)

        return self._push(np.concatenate(vals, axis=axis), bw)

    def slice_flat(self, flat, start, shape):
        """View ``flat[start:start+size]`` reshaped; adjoint scatters back."""
        size = int(np.prod(shape))
        n = _val(flat).shape[0]
        owned = self._owned

        def bw(g):
            if not isinstance(flat, Var):
                return
            if flat.grad is None or id(flat.grad) not in owned:
                flat.grad = np.zeros(n) if flat.grad is None else flat.grad.copy()
                owned.add(id(flat.grad))
            flat.grad[start:start + size] += g.ravel()

        return self._push(_val(flat)[start:start + size].reshape(shape), bw)

    def sum(self, a):
        shape = np.shape(_val(a))
        return self._push(np.sum(_val(a)), lambda g: _acc(a, np.broadcast_to(g, shape).copy()))

    def mean(self, a):
        shape = np.shape(_val(a))
        n = max(1, int(np.prod(shape)))
        return self._push(np.mean(_val(a)), lambda g: _acc(a, np.broadcast_to(g / n, shape).copy()))

    def smooth_l1(self, pred, target, delta=1.0):
        """Mean Huber-style smooth-L1 over all elements."""
        d = _val(pred) - np.asarray(target)
        ad = np.abs(d)
        quad = ad < delta
        vals = np.where(quad, 0.5 * d * d / delta, ad - 0.5 * delta)
        n = d.size

        def bw(g):
            _acc(pred, g * np.where(quad, d / delta, np.sign(d)) / n)

        return self._push(np.mean(vals), bw)

    def custom(self, value, inputs, vjps):
        """Generic node: ``vjps[i](g)`` is the adjoint contribution to ``inputs[i]``."""

        def bw(g):
            for inp, vjp in zip(inputs, vjps):
                if isinstance(inp, Var):
                    _acc(inp, vjp(g))

        return self._push(value, bw)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _acc(x, g):
    if not isinstance(x, Var):
        return
    if np.shape(g) != np.shape(x.value):
        raise ShapeMismatchError(f"adjoint shape {np.shape(g)} != value shape {np.shape(x.value)}")
    # adjoints are never mutated in place (except owned scatter buffers), so no copy
    x.grad = g if x.grad is None else x.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g
