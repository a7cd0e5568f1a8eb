"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every op is a method on :class:`Tape`. Nodes are appended in execution order,
so the recording order is a topological order and :meth:`Tape.backward`
simply walks it in reverse.
"""

import numpy as np
from scipy.special import expit

from . import kernels


class NumericalError(FloatingPointError):
    """A forward op produced NaN/Inf, or gradients went non-finite."""


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    def zero_buffer(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.value.shape}>"


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records operations for one forward pass.

    With ``record=False`` nothing is kept and :meth:`backward` is unavailable;
    this is the inference mode used by greedy decoding.
    """

    def __init__(self, record=True, check_finite=True):
        self.nodes = []
        self.record = record
        self.check_finite = check_finite
        self._params = {}

    def __len__(self):
        return len(self.nodes)

    # -- leaves ------------------------------------------------------------

    def constant(self, value):
        return Node(np.asarray(value, dtype=np.float64))

    def parameter(self, store, name):
        """Leaf bound to ``store[name]``; reused if requested twice on this tape."""
        key = (id(store), name)
        entry = self._params.get(key)
        if entry is None:
            entry = (Node(store.value(name), name=name), store, name)
            self._params[key] = entry
        return entry[0]

    def _emit(self, value, parents, backward_fn, op):
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite output from op {op!r}")
        node = Node(value, parents, backward_fn)
        if self.record:
            self.nodes.append(node)
        return node

    # -- backward ----------------------------------------------------------

    def backward(self, loss):
        """Backpropagate from a scalar ``loss`` and accumulate into parameter stores."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        for node, store, name in self._params.values():
            if node.grad is not None:
                store.accumulate_grad(name, node.grad)

    # -- elementwise -------------------------------------------------------

    def add(self, a, b):
        def bw(g):
            a.accumulate(_unbroadcast(g, a.shape))
            b.accumulate(_unbroadcast(g, b.shape))

        return self._emit(a.value + b.value, (a, b), bw, "add")

    def sub(self, a, b):
        def bw(g):
            a.accumulate(_unbroadcast(g, a.shape))
            b.accumulate(-_unbroadcast(g, b.shape))

        return self._emit(a.value - b.value, (a, b), bw, "sub")

    def mul(self, a, b):
        def bw(g):
            a.accumulate(_unbroadcast(g * b.value, a.shape))
            b.accumulate(_unbroadcast(g * a.value, b.shape))

        return self._emit(a.value * b.value, (a, b), bw, "mul")

    def scale(self, a, c):
        c = float(c)

        def bw(g):
            a.accumulate(g * c)

        return self._emit(a.value * c, (a,), bw, "scale")

    def one_minus(self, a):
        def bw(g):
            a.accumulate(-g)

        return self._emit(1.0 - a.value, (a,), bw, "one_minus")

    def add_n(self, items):
        items = list(items)
        if not items:
            raise ValueError("add_n of nothing")
        out = items[0].value.copy()
        for it in items[1:]:
            out = out + it.value

        def bw(g):
            for it in items:
                it.accumulate(g)

        return self._emit(out, tuple(items), bw, "add_n")

    def tanh(self, a):
        y = np.tanh(a.value)

        def bw(g):
            a.accumulate(g * (1.0 - y * y))

        return self._emit(y, (a,), bw, "tanh")

    def sigmoid(self, a):
        y = expit(a.value)

        def bw(g):
            a.accumulate(g * y * (1.0 - y))

        return self._emit(y, (a,), bw, "sigmoid")

    def log(self, a, floor=0.0):
        """Natural log of ``max(a, floor)``; clamped entries pass no gradient."""
        clamped = a.value < floor
        x = np.where(clamped, floor, a.value)
        if np.any(x <= 0.0):
            raise NumericalError("log of a non-positive value")

        def bw(g):
            a.accumulate(np.where(clamped, 0.0, g / x))

        return self._emit(np.log(x), (a,), bw, "log")

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a, b):
        av, bv = a.value, b.value
        if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

        def bw(g):
            if av.ndim == 1 and bv.ndim == 1:
                a.accumulate(g * bv)
                b.accumulate(g * av)
            elif av.ndim == 1:
                a.accumulate(bv @ g)
                b.accumulate(np.outer(av, g))
            elif bv.ndim == 1:
                a.accumulate(g[..., None] * bv)
                lead = tuple(range(av.ndim - 1))
                b.accumulate(np.tensordot(av, g, axes=(lead, lead)))
            else:
                a.accumulate(g @ bv.T)
                b.accumulate(av.T @ g)

        return self._emit(av @ bv, (a, b), bw, "matmul")

    def affine(self, W, x, b):
        """``W @ x + b``."""
        Wv, xv = W.value, x.value
        if Wv.ndim != 2 or Wv.shape[1] != xv.shape[0] or b.value.shape[0] != Wv.shape[0]:
            raise ShapeError(
                f"affine shape mismatch: W{Wv.shape} x{xv.shape} b{b.value.shape}"
            )

        def bw(g):
            if xv.ndim == 1:
                W.accumulate(np.outer(g, xv))
                b.accumulate(g)
            else:
                W.accumulate(g @ xv.T)
                b.accumulate(g.sum(axis=1))
            x.accumulate(Wv.T @ g)

        out = Wv @ xv + (b.value if xv.ndim == 1 else b.value[:, None])
        return self._emit(out, (W, x, b), bw, "affine")

    def dot(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"dot shape mismatch: {a.shape} vs {b.shape}")
        return self.matmul(a, b)

    def transpose(self, a):
        def bw(g):
            a.accumulate(g.T)

        return self._emit(a.value.T.copy(), (a,), bw, "transpose")

    # -- shape ops ---------------------------------------------------------

    def concat(self, items, axis=-1):
        items = list(items)
        vals = [it.value for it in items]
        ax = axis if axis >= 0 else vals[0].ndim + axis
        for v in vals[1:]:
            if v.ndim != vals[0].ndim or any(
                v.shape[k] != vals[0].shape[k] for k in range(v.ndim) if k != ax
            ):
                raise ShapeError(f"concat shape mismatch: {vals[0].shape} vs {v.shape}")
        sizes = np.cumsum([v.shape[ax] for v in vals])[:-1]

        def bw(g):
            for it, part in zip(items, np.split(g, sizes, axis=ax)):
                it.accumulate(part)

        return self._emit(np.concatenate(vals, axis=ax), tuple(items), bw, "concat")

    def stack(self, items):
        items = list(items)

        def bw(g):
            for k, it in enumerate(items):
                it.accumulate(g[k])

        return self._emit(np.stack([it.value for it in items]), tuple(items), bw, "stack")

    def reshape(self, a, shape):
        def bw(g):
            a.accumulate(g.reshape(a.shape))

        return self._emit(a.value.reshape(shape), (a,), bw, "reshape")

    def take(self, a, index):
        """Basic (int/slice/tuple) indexing."""

        def bw(g):
            buf = a.zero_buffer()
            buf[index] += g

        return self._emit(np.array(a.value[index], copy=True), (a,), bw, "take")

    def gather(self, a, rows, cols):
        """``a[rows[k], cols[k]]`` for each k, as a vector."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)

        def bw(g):
            buf = a.zero_buffer()
            np.add.at(buf, (rows, cols), g)

        return self._emit(a.value[rows, cols].copy(), (a,), bw, "gather")

    # -- reductions --------------------------------------------------------

    def sum(self, a, axis=None):
        def bw(g):
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.shape))
            else:
                a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return self._emit(np.asarray(a.value.sum(axis=axis)), (a,), bw, "sum")

    def max(self, a, axis):
        """Max over ``axis``; the gradient goes to the first maximizer."""
        v = a.value
        arg = np.argmax(v, axis=axis)
        out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis)
        out = np.squeeze(out, axis=axis)

        def bw(g):
            buf = a.zero_buffer()
            idx = np.expand_dims(arg, axis)
            cur = np.take_along_axis(buf, idx, axis=axis)
            np.put_along_axis(buf, idx, cur + np.expand_dims(g, axis), axis=axis)

        return self._emit(out, (a,), bw, "max")

    # -- probability -------------------------------------------------------

    def softmax(self, a, axis=-1):
        v = a.value
        e = np.exp(v - v.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            a.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return self._emit(y, (a,), bw, "softmax")

    def masked_softmax(self, a, mask, axis=-1):
        """Softmax restricted to ``mask``; masked entries are exactly 0."""
        v = a.value
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match input {v.shape}")
        if not np.all(mask.any(axis=axis)):
            raise ValueError("masked softmax: a row has no unmasked position")
        shifted = np.where(mask, v, -np.inf)
        shifted = shifted - shifted.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            a.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return self._emit(y, (a,), bw, "masked_softmax")

    def log_softmax(self, a):
        v = a.value
        shifted = v - v.max()
        lse = np.log(np.exp(shifted).sum())
        y = shifted - lse
        p = np.exp(y)

        def bw(g):
            a.accumulate(g - p * g.sum())

        return self._emit(y, (a,), bw, "log_softmax")

    def dropout(self, a, rate, rng, train):
        """Inverted dropout; identity unless ``train`` and ``rate > 0``."""
        if not train or rate <= 0.0:
            return a
        keep = 1.0 - rate
        mask = (rng.random(a.shape) < keep) / keep

        def bw(g):
            a.accumulate(g * mask)

        return self._emit(a.value * mask, (a,), bw, "dropout")

    # -- fused recurrent / pooling kernels ---------------------------------

    def lstm_cell(self, x, h, c, W, b):
        """One LSTM step; returns ``(h_new, c_new)`` nodes."""
        n = h.shape[0]
        if W.shape != (4 * n, x.shape[0] + n) or b.shape != (4 * n,) or c.shape != (n,):
            raise ShapeError(
                f"lstm_cell shape mismatch: W{W.shape} b{b.shape} x{x.shape} "
                f"h{h.shape} c{c.shape}"
            )
        h_new, c_new, xh, acts, tc = kernels.lstm_cell_forward(
            W.value, b.value, x.value, h.value, c.value
        )
        d_in = x.shape[0]
        cell_value = c.value

        def bw(g):
            dxh, dc_prev = kernels.lstm_cell_backward(
                W.value, xh, cell_value, acts, tc, g[0], g[1], W.zero_buffer(), b.zero_buffer()
            )
            x.accumulate(dxh[:d_in])
            h.accumulate(dxh[d_in:])
            c.accumulate(dc_prev)

        joint = self._emit(np.stack((h_new, c_new)), (x, h, c, W, b), bw, "lstm_cell")
        return self.take(joint, 0), self.take(joint, 1)

    def lstm_sequence(self, X, h0, c0, W, b, reverse=False):
        """Run an LSTM over the rows of ``X``; returns ``(H, C)`` nodes of shape (T, hidden)."""
        n = h0.shape[0]
        if X.value.ndim != 2 or W.shape != (4 * n, X.shape[1] + n) or b.shape != (4 * n,):
            raise ShapeError(
                f"lstm_sequence shape mismatch: W{W.shape} b{b.shape} X{X.shape} h0{h0.shape}"
            )
        Hs, Cs, XH, ACTS, TC = kernels.lstm_sequence_forward(
            W.value, b.value, X.value, h0.value, c0.value, reverse
        )
        c0v = c0.value

        def bw(g):
            dX, dh0, dc0 = kernels.lstm_sequence_backward(
                W.value, X.value, c0v, Cs, XH, ACTS, TC, g[0], g[1], reverse,
                W.zero_buffer(), b.zero_buffer(),
            )
            X.accumulate(dX)
            h0.accumulate(dh0)
            c0.accumulate(dc0)

        joint = self._emit(np.stack((Hs, Cs)), (X, h0, c0, W, b), bw, "lstm_sequence")
        return self.take(joint, 0), self.take(joint, 1)

    def weighted_maxpool(self, B, H):
        """``out[t, k] = max_j B[j, t] * H[j, k]`` over all positions ``j``."""
        if B.value.ndim != 2 or B.shape[0] != B.shape[1] or B.shape[0] != H.shape[0]:
            raise ShapeError(f"weighted_maxpool shape mismatch: B{B.shape} H{H.shape}")
        out, arg = kernels.weighted_maxpool_forward(B.value, H.value)

        def bw(g):
            dB, dH = kernels.weighted_maxpool_backward(B.value, H.value, arg, g)
            B.accumulate(dB)
            H.accumulate(dH)

        return self._emit(out, (B, H), bw, "weighted_maxpool")
