"""Soft dependency graphs: constrained head distributions and their powers.

Orientation convention used throughout: ``A[j, t]`` is the probability that
token ``j`` is the head (parent) of token ``t``. Rows are candidate parents,
columns are dependents, and every column sums to 1. With that orientation the
d-th order parent graph is the matrix power ``A^d`` and the d-th order child
graph is its transpose, ``B^d = (A^d).T``, so ``B[j, t]`` scores ``j`` as a
d-th order descendant of ``t``.

Functions accept either numpy arrays (plain evaluation) or tape nodes together
with a :class:`~slahan.numerics.Tape` (differentiable evaluation).
"""

import itertools

import numpy as np

from .numerics import Tape

ORACLE_MAX_N = 8
ORACLE_MAX_ORDER = 4


def head_mask(size):
    """Legal-head mask for ``size = n + 1`` positions.

    Column 0 (the root) may only attach to itself; no other token may attach
    to itself.
    """
    mask = np.ones((size, size), dtype=bool)
    mask[1:, 0] = False
    idx = np.arange(1, size)
    mask[idx, idx] = False
    return mask


def constrained_head_distribution(scores, tape=None):
    """Column-wise masked softmax of raw scores ``scores[j, t]`` under the head constraints."""
    if tape is None:
        t = Tape(record=False)
        return constrained_head_distribution(t.constant(scores), t).value
    size = scores.shape[0]
    if scores.value.ndim != 2 or scores.shape[1] != size:
        raise ValueError(f"scores must be square, got {scores.shape}")
    if size == 1:
        return tape.masked_softmax(scores, np.ones((1, 1), dtype=bool), axis=0)
    return tape.masked_softmax(scores, head_mask(size), axis=0)


def hard_head_matrix(heads):
    """One-hot ``A1`` for a fixed tree; ``heads[t]`` is the head of ``t`` (``heads[0] == 0``)."""
    size = len(heads)
    A = np.zeros((size, size))
    A[0, 0] = 1.0
    for t in range(1, size):
        A[heads[t], t] = 1.0
    return A


def compose_parent_graphs(A1, orders, tape=None):
    """``{d: A^d}`` for every requested order, built by successive multiplication."""
    orders = sorted(set(int(d) for d in orders))
    if not orders or orders[0] < 1:
        raise ValueError(f"orders must be positive integers, got {orders}")
    out = {}
    cur = A1
    for d in range(1, orders[-1] + 1):
        if d > 1:
            cur = tape.matmul(cur, A1) if tape is not None else cur @ A1
        if d in orders:
            out[d] = cur
    return out


def child_graphs_from_parent(parents, tape=None):
    """``{d: (A^d).T}``."""
    if tape is not None:
        return {d: tape.transpose(A) for d, A in parents.items()}
    return {d: np.ascontiguousarray(A.T) for d, A in parents.items()}


def path_sum_oracle(A1, d, t, j):
    """Sum over every length-``d`` head chain ``t -> k1 -> ... -> j`` of the edge products.

    Explicit enumeration, exponential in ``d``; independent of matrix
    multiplication and used to verify :func:`compose_parent_graphs`.
    """
    A1 = np.asarray(A1)
    size = A1.shape[0]
    if size - 1 > ORACLE_MAX_N or d > ORACLE_MAX_ORDER:
        raise ValueError(
            f"path_sum_oracle limited to n <= {ORACLE_MAX_N}, d <= {ORACLE_MAX_ORDER}"
        )
    if d < 1:
        raise ValueError("order must be >= 1")
    total = 0.0
    for middle in itertools.product(range(size), repeat=d - 1):
        chain = (t, *middle, j)
        p = 1.0
        for child, parent in zip(chain, chain[1:]):
            p *= A1[parent, child]
            if p == 0.0:
                break
        total += p
    return total


def parent_weighted_states(Ad, H, tape=None):
    """Row ``t`` of the result is ``sum_j Ad[j, t] * H[j]``."""
    if Ad.shape[0] != H.shape[0]:
        raise ValueError(f"dimension mismatch: graph {Ad.shape} vs states {H.shape}")
    if tape is not None:
        return tape.matmul(tape.transpose(Ad), H)
    return Ad.T @ H


def child_pooled_states(Bd, H, tape=None):
    """Row ``t`` of the result is the coordinate-wise ``max_j Bd[j, t] * H[j]``."""
    if Bd.shape[0] != H.shape[0]:
        raise ValueError(f"dimension mismatch: graph {Bd.shape} vs states {H.shape}")
    t = tape if tape is not None else Tape(record=False)
    Bn = Bd if tape is not None else t.constant(Bd)
    Hn = H if tape is not None else t.constant(H)
    out = t.weighted_maxpool(Bn, Hn)
    return out if tape is not None else out.value


def check_head_distribution(A1, atol=1e-12):
    """Raise ``AssertionError`` unless ``A1`` satisfies the head constraints."""
    A1 = np.asarray(A1)
    size = A1.shape[0]
    assert A1.shape == (size, size)
    assert A1[0, 0] == 1.0 and np.all(A1[1:, 0] == 0.0), "root column must be one-hot"
    idx = np.arange(1, size)
    assert np.all(A1[idx, idx] == 0.0), "diagonal must be zero for t >= 1"
    assert np.allclose(A1.sum(axis=0), 1.0, rtol=0.0, atol=atol), "columns must sum to 1"
    assert np.all(A1 >= 0.0)
