# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor engine.

Every function mirrors one in ``_kernels_py`` and must agree with it to
floating-point reassociation error. Accumulations run in double precision
regardless of the storage type.
"""
import numpy as np

from libc.math cimport exp, sqrt, INFINITY

ctypedef fused real:
    float
    double


def masked_softmax(real[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], r, c
    cdef double m, s, e
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, k), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for r in range(n):
        m = -INFINITY
        for c in range(k):
            if mask[r, c] and x[r, c] > m:
                m = x[r, c]
        if m == -INFINITY:
            continue
        s = 0.0
        for c in range(k):
            if mask[r, c]:
                e = exp(x[r, c] - m)
                out[r, c] = <real>e
                s += e
        for c in range(k):
            if mask[r, c]:
                out[r, c] = <real>(out[r, c] / s)
    return out_arr


def masked_softmax_backward(real[:, ::1] p, real[:, ::1] dp):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], r, c
    cdef double dot
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, k), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for r in range(n):
        dot = 0.0
        for c in range(k):
            dot += p[r, c] * dp[r, c]
        for c in range(k):
            out[r, c] = <real>(p[r, c] * (dp[r, c] - dot))
    return out_arr


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] shift, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], r, c
    cdef double mean, var, diff, inv
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    floored_arr = np.zeros(n, dtype=np.uint8)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef unsigned char[::1] floored = floored_arr
    for r in range(n):
        mean = 0.0
        for c in range(d):
            mean += x[r, c]
        mean /= d
        var = 0.0
        for c in range(d):
            diff = x[r, c] - mean
            var += diff * diff
        var /= d
        if var < eps:
            var = eps
            floored[r] = 1
        inv = 1.0 / sqrt(var)
        rstd[r] = <real>inv
        for c in range(d):
            diff = (x[r, c] - mean) * inv
            xhat[r, c] = <real>diff
            y[r, c] = <real>(diff * gain[c] + shift[c])
    return y_arr, xhat_arr, rstd_arr, floored_arr


def layer_norm_backward(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd,
                        const unsigned char[::1] floored, real[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], r, c
    cdef double mean_g, mean_gx, g
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_acc = np.zeros(d, dtype=np.float64)
    dshift_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_acc
    cdef double[::1] dshift = dshift_acc
    for r in range(n):
        mean_g = 0.0
        mean_gx = 0.0
        for c in range(d):
            g = dy[r, c] * gain[c]
            mean_g += g
            mean_gx += g * xhat[r, c]
            dgain[c] += dy[r, c] * xhat[r, c]
            dshift[c] += dy[r, c]
        mean_g /= d
        mean_gx /= d
        if floored[r]:
            mean_gx = 0.0
        for c in range(d):
            g = dy[r, c] * gain[c]
            dx[r, c] = <real>(rstd[r] * (g - mean_g - xhat[r, c] * mean_gx))
    return dx_arr, dgain_acc.astype(dtype), dshift_acc.astype(dtype)


def scatter_add_rows(Py_ssize_t n_rows, const long long[::1] index, real[:, ::1] src):
    cdef Py_ssize_t n = src.shape[0], d = src.shape[1], r, c, t
    dtype = np.float32 if real is float else np.float64
    acc_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] acc = acc_arr
    for r in range(n):
        t = index[r]
        for c in range(d):
            acc[t, c] += src[r, c]
    return acc_arr.astype(dtype)
