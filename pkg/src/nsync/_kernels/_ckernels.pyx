# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused MLP kernels.

Same contract as ``_pykernels``. Matrix products go straight to BLAS through
scipy's Cython bindings; element-wise work runs in C loops, so one call makes
no Python-level array operations beyond buffer allocation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef inline void _matmul_bias(double[:, ::1] a, double[:, ::1] w, double[::1] b, double[:, ::1] out) noexcept nogil:
    # out = a @ w + b (row-major), computed as out^T = w^T a^T in column-major BLAS
    cdef int m = a.shape[0]
    cdef int k = a.shape[1]
    cdef int n = w.shape[1]
    cdef int i, j
    cdef double one = 1.0
    cdef char nt = b'N'
    for i in range(m):
        for j in range(n):
            out[i, j] = b[j]
    dgemm(&nt, &nt, &n, &m, &k, &one, &w[0, 0], &n, &a[0, 0], &k, &one, &out[0, 0], &n)


cdef inline void _grad_input(double[:, ::1] g, double[:, ::1] w, double[:, ::1] out) noexcept nogil:
    # out = g @ w^T ; g (m x n), w (k x n), out (m x k)
    cdef int m = g.shape[0]
    cdef int n = g.shape[1]
    cdef int k = w.shape[0]
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char tt = b'T'
    cdef char nt = b'N'
    dgemm(&tt, &nt, &k, &m, &n, &one, &w[0, 0], &n, &g[0, 0], &n, &zero, &out[0, 0], &k)


cdef inline void _grad_weight(double[:, ::1] a, double[:, ::1] g, double[:, ::1] out) noexcept nogil:
    # out = a^T @ g ; a (m x k), g (m x n), out (k x n)
    cdef int m = a.shape[0]
    cdef int k = a.shape[1]
    cdef int n = g.shape[1]
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char tt = b'T'
    cdef char nt = b'N'
    dgemm(&nt, &tt, &n, &k, &m, &one, &g[0, 0], &n, &a[0, 0], &k, &zero, &out[0, 0], &n)


cdef inline void _silu_inplace(double[:, ::1] a, double[:, ::1] h, double[:, ::1] sig) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            s = 1.0 / (1.0 + exp(-a[i, j]))
            sig[i, j] = s
            h[i, j] = a[i, j] * s


def mlp_forward(x, list weights, list biases):
    cdef double[:, ::1] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] a
    cdef double[:, ::1] w
    cdef double[::1] b
    cdef double[:, ::1] sig
    cdef Py_ssize_t nl = len(weights)
    cdef Py_ssize_t i
    cdef Py_ssize_t m = h.shape[0]
    for i in range(nl):
        w = weights[i]
        b = biases[i]
        a = np.empty((m, w.shape[1]))
        _matmul_bias(h, w, b, a)
        if i < nl - 1:
            sig = np.empty((m, w.shape[1]))
            _silu_inplace(a, a, sig)
        h = a
    return np.asarray(h)


def mlp_loss_grad(x, target, list weights, list biases, bint want_weights=True):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] tv = np.ascontiguousarray(target, dtype=np.float64)
    cdef Py_ssize_t nl = len(weights)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t i, r, c
    cdef double[:, ::1] w
    cdef double[::1] b
    cdef double[:, ::1] a
    cdef double[:, ::1] h
    cdef double[:, ::1] sig
    cdef double[:, ::1] g
    cdef double[:, ::1] gin
    cdef double[:, ::1] dw
    cdef double[::1] db
    cdef double s, d, loss, scale, acc

    acts = [xv]
    pres = []
    sigs = []
    h = xv
    for i in range(nl):
        w = weights[i]
        b = biases[i]
        a = np.empty((m, w.shape[1]))
        _matmul_bias(h, w, b, a)
        if i < nl - 1:
            hn = np.empty((m, w.shape[1]))
            sig = np.empty((m, w.shape[1]))
            _silu_inplace(a, hn, sig)
            pres.append(a)
            sigs.append(sig)
            acts.append(hn)
            h = hn
        else:
            h = a

    g = np.empty((m, h.shape[1]))
    loss = 0.0
    scale = 2.0 / (m * h.shape[1])
    for r in range(m):
        for c in range(h.shape[1]):
            d = h[r, c] - tv[r, c]
            loss += d * d
            g[r, c] = d * scale
    loss /= m * h.shape[1]

    dws = [None] * nl if want_weights else None
    dbs = [None] * nl if want_weights else None
    for i in range(nl - 1, -1, -1):
        if i != nl - 1:
            a = pres[i]
            sig = sigs[i]
            for r in range(m):
                for c in range(g.shape[1]):
                    s = sig[r, c]
                    g[r, c] = g[r, c] * s * (1.0 + a[r, c] * (1.0 - s))
        w = weights[i]
        if want_weights:
            h = acts[i]
            dw = np.empty((w.shape[0], w.shape[1]))
            _grad_weight(h, g, dw)
            db = np.empty(w.shape[1])
            for c in range(g.shape[1]):
                acc = 0.0
                for r in range(m):
                    acc += g[r, c]
                db[c] = acc
            dws[i] = np.asarray(dw)
            dbs[i] = np.asarray(db)
        gin = np.empty((m, w.shape[0]))
        _grad_input(g, w, gin)
        g = gin
    return loss, np.asarray(g), dws, dbs
