"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
with the same signature and in-place accumulation contract.
"""

import numpy as np
from scipy.special import expit


def lstm_cell_forward(W, b, x, h, c):
    """One LSTM step. Gate order in ``W`` rows: input, forget, output, candidate.

    Returns ``(h_new, c_new, xh, acts, tanh_c)``; the last three are the cache
    consumed by :func:`lstm_cell_backward`.
    """
    n = h.shape[0]
    xh = np.concatenate((x, h))
    z = W @ xh + b
    acts = np.empty_like(z)
    acts[: 3 * n] = expit(z[: 3 * n])
    acts[3 * n :] = np.tanh(z[3 * n :])
    c_new = acts[n : 2 * n] * c + acts[:n] * acts[3 * n :]
    tanh_c = np.tanh(c_new)
    h_new = acts[2 * n : 3 * n] * tanh_c
    return h_new, c_new, xh, acts, tanh_c


def lstm_cell_backward(W, xh, c_prev, acts, tanh_c, dh, dc, dW, db):
    """Backward of one LSTM step; accumulates into ``dW``/``db`` in place.

    Returns ``(dxh, dc_prev)``.
    """
    n = c_prev.shape[0]
    i = acts[:n]
    f = acts[n : 2 * n]
    o = acts[2 * n : 3 * n]
    g = acts[3 * n :]
    dct = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.empty(4 * n)
    dz[:n] = dct * g * i * (1.0 - i)
    dz[n : 2 * n] = dct * c_prev * f * (1.0 - f)
    dz[2 * n : 3 * n] = dh * tanh_c * o * (1.0 - o)
    dz[3 * n :] = dct * i * (1.0 - g * g)
    dW += np.outer(dz, xh)
    db += dz
    return W.T @ dz, dct * f


def lstm_sequence_forward(W, b, X, h0, c0, reverse):
    """Run the cell over every row of ``X`` (reversed order if ``reverse``).

    Outputs are indexed by position, not by processing order.
    """
    T = X.shape[0]
    n = h0.shape[0]
    Hs = np.empty((T, n))
    Cs = np.empty((T, n))
    XH = np.empty((T, X.shape[1] + n))
    ACTS = np.empty((T, 4 * n))
    TC = np.empty((T, n))
    h, c = h0, c0
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c, XH[t], ACTS[t], TC[t] = lstm_cell_forward(W, b, X[t], h, c)
        Hs[t] = h
        Cs[t] = c
    return Hs, Cs, XH, ACTS, TC


def lstm_sequence_backward(W, X, c0, Cs, XH, ACTS, TC, dHs, dCs, reverse, dW, db):
    """Backward through :func:`lstm_sequence_forward`.

    Returns ``(dX, dh0, dc0)``; parameter gradients accumulate in place.
    """
    T, d_in = X.shape
    n = c0.shape[0]
    dX = np.empty((T, d_in))
    dh = np.zeros(n)
    dc = np.zeros(n)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        if reverse:
            c_prev = Cs[t + 1] if t + 1 < T else c0
        else:
            c_prev = Cs[t - 1] if t > 0 else c0
        dxh, dc = lstm_cell_backward(
            W, XH[t], c_prev, ACTS[t], TC[t], dh + dHs[t], dc + dCs[t], dW, db
        )
        dX[t] = dxh[:d_in]
        dh = dxh[d_in:]
    return dX, dh, dc


def weighted_maxpool_forward(B, H):
    """``out[t, k] = max_j B[j, t] * H[j, k]``; ties resolve to the lowest ``j``."""
    prod = B.T[:, :, None] * H[None, :, :]
    arg = np.argmax(prod, axis=1)
    out = np.take_along_axis(prod, arg[:, None, :], axis=1)[:, 0, :]
    return out, arg


def weighted_maxpool_backward(B, H, arg, dout):
    """Route ``dout`` to the winning ``(j, t)`` weight and ``(j, k)`` state."""
    T, D = dout.shape
    dB = np.zeros_like(B)
    dH = np.zeros_like(H)
    tt = np.repeat(np.arange(T), D)
    kk = np.tile(np.arange(D), T)
    jj = arg.reshape(-1)
    g = dout.reshape(-1)
    np.add.at(dB, (jj, tt), g * H[jj, kk])
    np.add.at(dH, (jj, kk), g * B[jj, tt])
    return dB, dH


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] > prev[j] else prev[j]
        prev = cur
    return prev[-1]
