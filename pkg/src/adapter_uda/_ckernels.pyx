# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; signatures mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport erf, exp, sqrt, log

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] y = out
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = <floating>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return out


def gelu_backward(floating[::1] x, floating[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] gx = out
    cdef double v
    for i in range(n):
        v = x[i]
        gx[i] = <floating>(gy[i] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                    + v * INV_SQRT_2PI * exp(-0.5 * v * v)))
    return out


def layer_norm_forward(floating[:, ::1] x, floating[::1] gamma,
                       floating[::1] beta, double eps):
    cdef Py_ssize_t i, j, n = x.shape[0], h = x.shape[1]
    dt = np.asarray(x).dtype
    y_arr = np.empty((n, h), dtype=dt)
    xhat_arr = np.empty((n, h), dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(h):
            mu += x[i, j]
        mu /= h
        var = 0.0
        for j in range(h):
            d = x[i, j] - mu
            var += d * d
        var /= h
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <floating>r
        for j in range(h):
            d = (x[i, j] - mu) * r
            xhat[i, j] = <floating>d
            y[i, j] = <floating>(d * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(floating[:, ::1] gy, floating[:, ::1] xhat,
                        floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t i, j, n = gy.shape[0], h = gy.shape[1]
    dt = np.asarray(gy).dtype
    gx_arr = np.empty((n, h), dtype=dt)
    cdef floating[:, ::1] gx = gx_arr
    cdef double[::1] gg = np.zeros(h, dtype=np.float64)
    cdef double[::1] gb = np.zeros(h, dtype=np.float64)
    cdef double m1, m2, t
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(h):
            t = gy[i, j] * gamma[j]
            m1 += t
            m2 += t * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        m1 /= h
        m2 /= h
        for j in range(h):
            gx[i, j] = <floating>(rstd[i] * (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2))
    return gx_arr, np.asarray(gg).astype(dt), np.asarray(gb).astype(dt)


def softmax_forward(floating[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], c = x.shape[1]
    out = np.empty((n, c), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    cdef double m, s, e
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = exp(x[i, j] - m)
            y[i, j] = <floating>e
            s += e
        for j in range(c):
            y[i, j] = <floating>(y[i, j] / s)
    return out


def softmax_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t i, j, n = y.shape[0], c = y.shape[1]
    out = np.empty((n, c), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] gx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += gy[i, j] * y[i, j]
        for j in range(c):
            gx[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out


def cross_entropy_forward(floating[:, ::1] logits, cnp.int64_t[::1] targets,
                          floating[::1] weights):
    cdef Py_ssize_t i, j, n = logits.shape[0], c = logits.shape[1]
    probs_arr = np.empty((n, c), dtype=np.asarray(logits).dtype)
    cdef floating[:, ::1] probs = probs_arr
    cdef double m, s, e, total = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            e = exp(logits[i, j] - m)
            probs[i, j] = <floating>e
            s += e
        for j in range(c):
            probs[i, j] = <floating>(probs[i, j] / s)
        if weights[i] != 0:
            total += weights[i] * (log(s) - (logits[i, targets[i]] - m))
    return total, probs_arr


def cross_entropy_backward(floating[:, ::1] probs, cnp.int64_t[::1] targets,
                           floating[::1] weights, double scale):
    cdef Py_ssize_t i, j, n = probs.shape[0], c = probs.shape[1]
    out = np.empty((n, c), dtype=np.asarray(probs).dtype)
    cdef floating[:, ::1] g = out
    cdef double w
    for i in range(n):
        w = weights[i] * scale
        for j in range(c):
            g[i, j] = <floating>(probs[i, j] * w)
        g[i, targets[i]] = <floating>((probs[i, targets[i]] - 1.0) * w)
    return out


def scatter_add_rows(Py_ssize_t n_rows, cnp.int64_t[::1] index, floating[:, ::1] g):
    cdef Py_ssize_t i, j, r, n = g.shape[0], h = g.shape[1]
    out = np.zeros((n_rows, h), dtype=np.asarray(g).dtype)
    cdef floating[:, ::1] o = out
    for i in range(n):
        r = index[i]
        for j in range(h):
            o[r, j] += g[i, j]
    return out
