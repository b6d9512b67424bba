# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as numpy_backend, fused loops.

Every function computes each output row with a fixed k-order reduction, so
`lowrank_delta_fwd` is row-stable here by construction.
"""

from libc.math cimport exp, log, sqrt

import numpy as np


cdef double[:, ::1] _m2(object x):
    return np.ascontiguousarray(x, dtype=np.float64)


cdef double[::1] _m1(object x):
    return np.ascontiguousarray(x, dtype=np.float64)


def softmax_rows_fwd(object x_in):
    cdef double[:, ::1] x = _m2(x_in)
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n))
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_rows_bwd(object y_in, object gy_in):
    cdef double[:, ::1] y = _m2(y_in), gy = _m2(gy_in)
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n))
    cdef double[:, ::1] gx = out
    cdef double inner
    for i in range(m):
        inner = 0.0
        for j in range(n):
            inner += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - inner)
    return out


def layernorm_fwd(object x_in, object gamma_in, object beta_in, double eps):
    cdef double[:, ::1] x = _m2(x_in)
    cdef double[::1] gamma = _m1(gamma_in), beta = _m1(beta_in)
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n))
    xhat_arr = np.empty((m, n))
    rstd_arr = np.empty(m)
    cdef double[:, ::1] y = out, xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    for i in range(m):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layernorm_bwd(object gy_in, object xhat_in, object rstd_in, object gamma_in):
    cdef double[:, ::1] gy = _m2(gy_in), xhat = _m2(xhat_in)
    cdef double[::1] rstd = _m1(rstd_in), gamma = _m1(gamma_in)
    cdef Py_ssize_t m = gy.shape[0], n = gy.shape[1], i, j
    gx_arr = np.empty((m, n))
    ggamma_arr = np.zeros(n)
    gbeta_arr = np.zeros(n)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_arr, gbeta = gbeta_arr
    cdef double m1, m2, gxh
    for i in range(m):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gxh = gy[i, j] * gamma[j]
            m1 += gxh
            m2 += gxh * xhat[i, j]
            ggamma[j] += gy[i, j] * xhat[i, j]
            gbeta[j] += gy[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gx[i, j] = rstd[i] * (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return gx_arr, ggamma_arr, gbeta_arr


def cross_entropy_fwd(object logits_in, object targets_in, long ignore_id):
    cdef double[:, ::1] logits = _m2(logits_in)
    cdef long[::1] targets = np.ascontiguousarray(targets_in, dtype=np.int64)
    cdef Py_ssize_t m = logits.shape[0], n = logits.shape[1], i, j
    probs_arr = np.empty((m, n))
    cdef double[:, ::1] probs = probs_arr
    cdef double mx, z, loss_sum = 0.0
    cdef long n_valid = 0, t
    for i in range(m):
        mx = logits[i, 0]
        for j in range(1, n):
            if logits[i, j] > mx:
                mx = logits[i, j]
        z = 0.0
        for j in range(n):
            probs[i, j] = exp(logits[i, j] - mx)
            z += probs[i, j]
        for j in range(n):
            probs[i, j] /= z
        t = targets[i]
        if t != ignore_id:
            n_valid += 1
            loss_sum -= (logits[i, t] - mx) - log(z)
    return loss_sum, probs_arr, n_valid


def cross_entropy_bwd(object probs_in, object targets_in, long ignore_id, double gscale):
    cdef double[:, ::1] probs = _m2(probs_in)
    cdef long[::1] targets = np.ascontiguousarray(targets_in, dtype=np.int64)
    cdef Py_ssize_t m = probs.shape[0], n = probs.shape[1], i, j
    out = np.empty((m, n))
    cdef double[:, ::1] g = out
    cdef long t
    for i in range(m):
        t = targets[i]
        if t == ignore_id:
            for j in range(n):
                g[i, j] = 0.0
        else:
            for j in range(n):
                g[i, j] = probs[i, j] * gscale
            g[i, t] -= gscale
    return out


def scatter_add_rows(object acc_in, object ids_in, object rows_in):
    cdef double[:, ::1] acc = acc_in
    cdef long[::1] ids = np.ascontiguousarray(ids_in, dtype=np.int64)
    cdef double[:, ::1] rows = _m2(rows_in)
    cdef Py_ssize_t k = ids.shape[0], n = acc.shape[1], i, j
    cdef long r
    for i in range(k):
        r = ids[i]
        for j in range(n):
            acc[r, j] += rows[i, j]


def lowrank_delta_fwd(object e_in, object w_down_in, object w_up_in, bint relu):
    cdef double[:, ::1] e = _m2(e_in), wd = _m2(w_down_in), wu = _m2(w_up_in)
    cdef Py_ssize_t m = e.shape[0], d = e.shape[1], r = wd.shape[1], i, j, k
    delta_arr = np.zeros((m, d))
    hpre_arr = np.empty((m, r))
    cdef double[:, ::1] delta = delta_arr, hpre = hpre_arr
    cdef double acc, h
    for i in range(m):
        for j in range(r):
            acc = 0.0
            for k in range(d):
                acc += e[i, k] * wd[k, j]
            hpre[i, j] = acc
        for j in range(r):
            h = hpre[i, j]
            if relu and h < 0.0:
                continue
            for k in range(d):
                delta[i, k] += h * wu[j, k]
    return delta_arr, hpre_arr
