# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training-step kernels: fused dense MLP forward/backward/update.

Matrix products go through BLAS dgemm; everything elementwise is fused into
single passes to avoid the temporaries the numpy fallback allocates.
Semantics mirror fedns.kernels.pyref exactly.
"""

from libc.math cimport exp, fabs, sqrt
from libc.stdint cimport int64_t

from scipy.linalg.cython_blas cimport dgemm

import numpy as np


cdef void _matmul(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c,
                  bint ta, bint tb) noexcept nogil:
    """c = op(a) @ op(b) for row-major buffers, via the col-major swap trick."""
    cdef char fa, fb
    if tb:
        fa = b'T'
    else:
        fa = b'N'
    if ta:
        fb = b'T'
    else:
        fb = b'N'
    cdef int m = <int> c.shape[1]
    cdef int n = <int> c.shape[0]
    cdef int k
    if ta:
        k = <int> a.shape[0]
    else:
        k = <int> a.shape[1]
    cdef int lda = <int> b.shape[1]
    cdef int ldb = <int> a.shape[1]
    cdef int ldc = <int> c.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm(&fa, &fb, &m, &n, &k, &one, &b[0, 0], &lda, &a[0, 0], &ldb, &zero, &c[0, 0], &ldc)


cdef void _bias_act(double[:, ::1] z, double[::1] b, bint relu) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] += b[j]
            if relu and z[i, j] < 0.0:
                z[i, j] = 0.0


cdef void _softmax_grad_inplace(double[:, ::1] z, const int64_t[::1] y,
                                double temperature) noexcept nogil:
    """z := (softmax(z / T) - onehot(y)) / (B * T), row by row."""
    cdef Py_ssize_t i, j
    cdef Py_ssize_t rows = z.shape[0], cols = z.shape[1]
    cdef double m, s
    cdef double scale = 1.0 / (<double> rows * temperature)
    for i in range(rows):
        m = z[i, 0]
        for j in range(1, cols):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(cols):
            z[i, j] = exp((z[i, j] - m) / temperature)
            s += z[i, j]
        for j in range(cols):
            z[i, j] /= s
        z[i, y[i]] -= 1.0
        for j in range(cols):
            z[i, j] *= scale


cdef void _colsum(double[:, ::1] g, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(out.shape[0]):
        out[j] = 0.0
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            out[j] += g[i, j]


cdef void _add_prox2(double[:, ::1] d, double[:, ::1] p, double[:, ::1] a, double mu) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(d.shape[0]):
        for j in range(d.shape[1]):
            d[i, j] += mu * (p[i, j] - a[i, j])


cdef void _add_prox1(double[::1] d, double[::1] p, double[::1] a, double mu) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(d.shape[0]):
        d[i] += mu * (p[i] - a[i])


cdef void _relu_backward(double[:, ::1] g, double[:, ::1] act) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            if act[i, j] <= 0.0:
                g[i, j] = 0.0


cdef void _update2(double[:, ::1] w, double[:, ::1] v, double[:, ::1] d,
                   double lr, double momentum, double wd) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            v[i, j] = momentum * v[i, j] + d[i, j] + wd * w[i, j]
            w[i, j] -= lr * v[i, j]


cdef void _update1(double[::1] b, double[::1] v, double[::1] d,
                   double lr, double momentum, double wd) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(b.shape[0]):
        v[i] = momentum * v[i] + d[i] + wd * b[i]
        b[i] -= lr * v[i]


cdef void _norm_pair(double[:, ::1] dw, double[::1] db, double* l1, double* l2) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s1 = 0.0, s2 = 0.0
    for i in range(dw.shape[0]):
        for j in range(dw.shape[1]):
            s1 += fabs(dw[i, j])
            s2 += dw[i, j] * dw[i, j]
    for i in range(db.shape[0]):
        s1 += fabs(db[i])
        s2 += db[i] * db[i]
    l1[0] = s1
    l2[0] = sqrt(s2)


cdef list _forward(list ws, list bs, object x):
    cdef Py_ssize_t n_layers = len(ws)
    cdef Py_ssize_t layer
    acts = [x]
    for layer in range(n_layers):
        w = ws[layer]
        z = np.empty((x.shape[0], w.shape[1]))
        _matmul(acts[layer], w, z, 0, 0)
        _bias_act(z, bs[layer], layer < n_layers - 1)
        acts.append(z)
    return acts


def train_batch(list ws, list bs, list vws, list vbs, object x, object y, *,
                double lr, double momentum, double weight_decay,
                double temperature, double prox_mu,
                anchor_ws=None, anchor_bs=None, bint want_norms=False):
    """Fused forward/backward/SGD-momentum step; mutates ws/bs/vws/vbs in place.

    Returns (l1, l2) of the final layer's gradients when want_norms, else None.
    """
    cdef Py_ssize_t n_layers = len(ws)
    cdef Py_ssize_t layer
    cdef double l1 = 0.0, l2 = 0.0
    acts = _forward(ws, bs, x)
    _softmax_grad_inplace(acts[n_layers], y, temperature)
    g = acts[n_layers]
    for layer in range(n_layers - 1, -1, -1):
        w = ws[layer]
        dw = np.empty_like(w)
        _matmul(acts[layer], g, dw, 1, 0)
        db = np.empty(w.shape[1])
        _colsum(g, db)
        if prox_mu > 0.0:
            _add_prox2(dw, w, anchor_ws[layer], prox_mu)
            _add_prox1(db, bs[layer], anchor_bs[layer], prox_mu)
        if want_norms and layer == n_layers - 1:
            _norm_pair(dw, db, &l1, &l2)
        if layer > 0:
            g_prev = np.empty_like(acts[layer])
            _matmul(g, w, g_prev, 0, 1)
            _relu_backward(g_prev, acts[layer])
            g = g_prev
        _update2(w, vws[layer], dw, lr, momentum, weight_decay)
        _update1(bs[layer], vbs[layer], db, lr, momentum, weight_decay)
    if want_norms:
        return (l1, l2)
    return None


def grad_norms(list ws, list bs, object x, object y, *,
               double temperature, double prox_mu, anchor_ws=None, anchor_bs=None):
    """Last-layer gradient norms (l1, l2) at the current params, no update."""
    cdef double l1 = 0.0, l2 = 0.0
    acts = _forward(ws, bs, x)
    _softmax_grad_inplace(acts[len(ws)], y, temperature)
    g = acts[len(ws)]
    w = ws[len(ws) - 1]
    dw = np.empty_like(w)
    _matmul(acts[len(ws) - 1], g, dw, 1, 0)
    db = np.empty(w.shape[1])
    _colsum(g, db)
    if prox_mu > 0.0:
        _add_prox2(dw, w, anchor_ws[len(ws) - 1], prox_mu)
        _add_prox1(db, bs[len(ws) - 1], anchor_bs[len(ws) - 1], prox_mu)
    _norm_pair(dw, db, &l1, &l2)
    return (l1, l2)
