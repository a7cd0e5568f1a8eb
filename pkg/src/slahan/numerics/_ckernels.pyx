# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Same signatures, same in-place accumulation contract. Matrix-vector work goes
through the BLAS exposed by scipy so results track the numpy fallback to
within rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef void _cell_fwd(double[:, ::1] W, double[::1] b, double* xh, int m, int n,
                    double* c, double* acts, double* c_new, double* tc,
                    double* h_new) noexcept nogil:
    # W is (4n, m) row-major == (m, 4n) column-major, lda = m.
    cdef char trans = b'T'
    cdef int rows = 4 * n
    cdef int one = 1
    cdef double alpha = 1.0, beta = 1.0
    cdef int k
    for k in range(rows):
        acts[k] = b[k]
    dgemv(&trans, &m, &rows, &alpha, &W[0, 0], &m, xh, &one, &beta, acts, &one)
    for k in range(3 * n):
        acts[k] = _sigmoid(acts[k])
    for k in range(3 * n, 4 * n):
        acts[k] = tanh(acts[k])
    for k in range(n):
        c_new[k] = acts[n + k] * c[k] + acts[k] * acts[3 * n + k]
        tc[k] = tanh(c_new[k])
        h_new[k] = acts[2 * n + k] * tc[k]


cdef void _cell_bwd(double[:, ::1] W, double* xh, int m, int n, double* c_prev,
                    double* acts, double* tc, double* dh, double* dc,
                    double[:, ::1] dW, double[::1] db, double* dz,
                    double* dxh, double* dc_prev) noexcept nogil:
    cdef char trans = b'N'
    cdef int rows = 4 * n
    cdef int one = 1
    cdef double alpha = 1.0, beta = 0.0
    cdef double i, f, o, g, dct
    cdef int k
    for k in range(n):
        i = acts[k]
        f = acts[n + k]
        o = acts[2 * n + k]
        g = acts[3 * n + k]
        dct = dc[k] + dh[k] * o * (1.0 - tc[k] * tc[k])
        dz[k] = dct * g * i * (1.0 - i)
        dz[n + k] = dct * c_prev[k] * f * (1.0 - f)
        dz[2 * n + k] = dh[k] * tc[k] * o * (1.0 - o)
        dz[3 * n + k] = dct * i * (1.0 - g * g)
        dc_prev[k] = dct * f
    for k in range(rows):
        db[k] += dz[k]
    dger(&m, &rows, &alpha, xh, &one, dz, &one, &dW[0, 0], &m)
    dgemv(&trans, &m, &rows, &alpha, &W[0, 0], &m, dz, &one, &beta, dxh, &one)


def lstm_cell_forward(W, b, x, h, c):
    cdef int n = h.shape[0]
    cdef int d_in = x.shape[0]
    cdef int m = d_in + n
    cdef double[:, ::1] Wv = np.ascontiguousarray(W)
    cdef double[::1] bv = np.ascontiguousarray(b)
    xh = np.concatenate((x, h))
    cc = np.ascontiguousarray(c)
    acts = np.empty(4 * n)
    c_new = np.empty(n)
    tc = np.empty(n)
    h_new = np.empty(n)
    cdef double[::1] xhv = xh, cv = cc, av = acts, cnv = c_new, tcv = tc, hv = h_new
    _cell_fwd(Wv, bv, &xhv[0], m, n, &cv[0], &av[0], &cnv[0], &tcv[0], &hv[0])
    return h_new, c_new, xh, acts, tc


def lstm_cell_backward(W, xh, c_prev, acts, tanh_c, dh, dc, dW, db):
    cdef int n = c_prev.shape[0]
    cdef int m = xh.shape[0]
    cdef double[:, ::1] Wv = W
    cdef double[::1] xhv = np.ascontiguousarray(xh)
    cdef double[::1] cpv = np.ascontiguousarray(c_prev)
    cdef double[::1] av = np.ascontiguousarray(acts)
    cdef double[::1] tcv = np.ascontiguousarray(tanh_c)
    cdef double[::1] dhv = np.ascontiguousarray(dh, dtype=np.float64)
    cdef double[::1] dcv = np.ascontiguousarray(dc, dtype=np.float64)
    cdef double[:, ::1] dWv = dW
    cdef double[::1] dbv = db
    dz = np.empty(4 * n)
    dxh = np.empty(m)
    dcp = np.empty(n)
    cdef double[::1] dzv = dz, dxhv = dxh, dcpv = dcp
    _cell_bwd(Wv, &xhv[0], m, n, &cpv[0], &av[0], &tcv[0], &dhv[0], &dcv[0],
              dWv, dbv, &dzv[0], &dxhv[0], &dcpv[0])
    return dxh, dcp


def lstm_sequence_forward(W, b, X, h0, c0, bint reverse):
    cdef int T = X.shape[0]
    cdef int d_in = X.shape[1]
    cdef int n = h0.shape[0]
    cdef int m = d_in + n
    cdef double[:, ::1] Wv = np.ascontiguousarray(W)
    cdef double[::1] bv = np.ascontiguousarray(b)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X)
    Hs = np.empty((T, n))
    Cs = np.empty((T, n))
    XH = np.empty((T, m))
    ACTS = np.empty((T, 4 * n))
    TC = np.empty((T, n))
    cdef double[:, ::1] Hv = Hs, Cv = Cs, XHv = XH, Av = ACTS, TCv = TC
    cdef double[::1] h0v = np.ascontiguousarray(h0), c0v = np.ascontiguousarray(c0)
    cdef double* hp = &h0v[0]
    cdef double* cp = &c0v[0]
    cdef int step, t, k
    with nogil:
        for step in range(T):
            t = T - 1 - step if reverse else step
            for k in range(d_in):
                XHv[t, k] = Xv[t, k]
            for k in range(n):
                XHv[t, d_in + k] = hp[k]
            _cell_fwd(Wv, bv, &XHv[t, 0], m, n, cp, &Av[t, 0], &Cv[t, 0],
                      &TCv[t, 0], &Hv[t, 0])
            hp = &Hv[t, 0]
            cp = &Cv[t, 0]
    return Hs, Cs, XH, ACTS, TC


def lstm_sequence_backward(W, X, c0, Cs, XH, ACTS, TC, dHs, dCs, bint reverse, dW, db):
    cdef int T = X.shape[0]
    cdef int d_in = X.shape[1]
    cdef int n = c0.shape[0]
    cdef int m = d_in + n
    cdef double[:, ::1] Wv = W
    cdef double[:, ::1] Cv = np.ascontiguousarray(Cs)
    cdef double[:, ::1] XHv = np.ascontiguousarray(XH)
    cdef double[:, ::1] Av = np.ascontiguousarray(ACTS)
    cdef double[:, ::1] TCv = np.ascontiguousarray(TC)
    cdef double[:, ::1] dHv = np.ascontiguousarray(dHs, dtype=np.float64)
    cdef double[:, ::1] dCv = np.ascontiguousarray(dCs, dtype=np.float64)
    cdef double[::1] c0v = np.ascontiguousarray(c0)
    cdef double[:, ::1] dWv = dW
    cdef double[::1] dbv = db
    dX = np.empty((T, d_in))
    cdef double[:, ::1] dXv = dX
    dh_out = np.zeros(n)
    dc_out = np.zeros(n)
    cdef double[::1] dh = dh_out, dc = dc_out
    cdef double[::1] dh_in = np.empty(n), dc_in = np.empty(n)
    cdef double[::1] dz = np.empty(4 * n), dxh = np.empty(m)
    cdef double* c_prev
    cdef int step, t, k
    with nogil:
        for step in range(T):
            t = step if reverse else T - 1 - step
            if reverse:
                c_prev = &Cv[t + 1, 0] if t + 1 < T else &c0v[0]
            else:
                c_prev = &Cv[t - 1, 0] if t > 0 else &c0v[0]
            for k in range(n):
                dh_in[k] = dh[k] + dHv[t, k]
                dc_in[k] = dc[k] + dCv[t, k]
            _cell_bwd(Wv, &XHv[t, 0], m, n, c_prev, &Av[t, 0], &TCv[t, 0],
                      &dh_in[0], &dc_in[0], dWv, dbv, &dz[0], &dxh[0], &dc[0])
            for k in range(d_in):
                dXv[t, k] = dxh[k]
            for k in range(n):
                dh[k] = dxh[d_in + k]
    return dX, dh_out, dc_out


def weighted_maxpool_forward(B, H):
    cdef double[:, ::1] Bv = np.ascontiguousarray(B)
    cdef double[:, ::1] Hv = np.ascontiguousarray(H)
    cdef Py_ssize_t N = Bv.shape[0]
    cdef Py_ssize_t D = Hv.shape[1]
    out = np.empty((N, D))
    arg = np.empty((N, D), dtype=np.int64)
    cdef double[:, ::1] ov = out
    cdef cnp.int64_t[:, ::1] av = arg
    cdef Py_ssize_t t, j, k
    cdef double w, v
    with nogil:
        for t in range(N):
            w = Bv[0, t]
            for k in range(D):
                ov[t, k] = w * Hv[0, k]
                av[t, k] = 0
            for j in range(1, N):
                w = Bv[j, t]
                for k in range(D):
                    v = w * Hv[j, k]
                    if v > ov[t, k]:
                        ov[t, k] = v
                        av[t, k] = j
    return out, arg


def weighted_maxpool_backward(B, H, arg, dout):
    cdef double[:, ::1] Bv = np.ascontiguousarray(B)
    cdef double[:, ::1] Hv = np.ascontiguousarray(H)
    cdef cnp.int64_t[:, ::1] av = np.ascontiguousarray(arg, dtype=np.int64)
    cdef double[:, ::1] gv = np.ascontiguousarray(dout, dtype=np.float64)
    cdef Py_ssize_t N = Bv.shape[0]
    cdef Py_ssize_t D = Hv.shape[1]
    dB = np.zeros((N, N))
    dH = np.zeros((N, D))
    cdef double[:, ::1] dBv = dB, dHv = dH
    cdef Py_ssize_t t, j, k
    cdef double g
    with nogil:
        for t in range(N):
            for k in range(D):
                j = av[t, k]
                g = gv[t, k]
                dBv[j, t] += g * Hv[j, k]
                dHv[j, k] += g * Bv[j, t]
    return dB, dH


def lcs_length(a, b):
    cdef cnp.int64_t[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef cnp.int64_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t na = av.shape[0], nb = bv.shape[0]
    if na == 0 or nb == 0:
        return 0
    cdef cnp.int64_t[::1] prev = np.zeros(nb + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.zeros(nb + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef Py_ssize_t i, j
    for i in range(na):
        cur[0] = 0
        for j in range(1, nb + 1):
            if av[i] == bv[j - 1]:
                cur[j] = prev[j - 1] + 1
            elif cur[j - 1] > prev[j]:
                cur[j] = cur[j - 1]
            else:
                cur[j] = prev[j]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[nb])
