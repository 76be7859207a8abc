# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; signatures mirror ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(const double[:, ::1] x, double eps):
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    cdef double mu, var, d, s
    y_arr = np.empty((R, D))
    rstd_arr = np.empty(R)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] rstd = rstd_arr
    for r in range(R):
        mu = 0.0
        for j in range(D):
            mu += x[r, j]
        mu /= D
        var = 0.0
        for j in range(D):
            d = x[r, j] - mu
            var += d * d
        s = 1.0 / sqrt(var / D + eps)
        rstd[r] = s
        for j in range(D):
            y[r, j] = (x[r, j] - mu) * s
    return y_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] y, const double[::1] rstd):
    cdef Py_ssize_t r, j, R = g.shape[0], D = g.shape[1]
    cdef double mg, mgy
    out_arr = np.empty((R, D))
    cdef double[:, ::1] out = out_arr
    for r in range(R):
        mg = 0.0
        mgy = 0.0
        for j in range(D):
            mg += g[r, j]
            mgy += g[r, j] * y[r, j]
        mg /= D
        mgy /= D
        for j in range(D):
            out[r, j] = (g[r, j] - mg - y[r, j] * mgy) * rstd[r]
    return out_arr


def softmax_fwd(const double[:, ::1] x):
    # numpy's vectorised exp beats scalar libm here; the loops do the rest
    cdef Py_ssize_t r, j, R = x.shape[0], D = x.shape[1]
    cdef double m, s
    sh_arr = np.empty((R, D))
    cdef double[:, ::1] sh = sh_arr
    for r in range(R):
        m = x[r, 0]
        for j in range(1, D):
            if x[r, j] > m:
                m = x[r, j]
        for j in range(D):
            sh[r, j] = x[r, j] - m
    np.exp(sh_arr, out=sh_arr)
    for r in range(R):
        s = 0.0
        for j in range(D):
            s += sh[r, j]
        s = 1.0 / s
        for j in range(D):
            sh[r, j] *= s
    return sh_arr


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t r, j, R = g.shape[0], D = g.shape[1]
    cdef double s
    out_arr = np.empty((R, D))
    cdef double[:, ::1] out = out_arr
    for r in range(R):
        s = 0.0
        for j in range(D):
            s += g[r, j] * y[r, j]
        for j in range(D):
            out[r, j] = y[r, j] * (g[r, j] - s)
    return out_arr


cdef _gelu_tanh(const double[::1] xf):
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    u_arr = np.empty(n)
    cdef double[::1] u = u_arr
    for i in range(n):
        v = xf[i]
        u[i] = GELU_C * (v + GELU_A * v * v * v)
    return np.tanh(u_arr, out=u_arr)


def gelu_fwd(x):
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    th_arr = _gelu_tanh(xf)
    cdef double[::1] th = th_arr
    for i in range(n):
        th[i] = 0.5 * xf[i] * (1.0 + th[i])
    return th_arr.reshape(np.shape(x))


def gelu_bwd(g, x):
    cdef const double[::1] gf = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, v2, t
    th_arr = _gelu_tanh(xf)
    cdef double[::1] th = th_arr
    for i in range(n):
        v = xf[i]
        v2 = v * v
        t = th[i]
        th[i] = gf[i] * (0.5 * (1.0 + t)
                         + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2))
    return th_arr.reshape(np.shape(x))


def scatter_add_rows(const double[:, ::1] y, idx, Py_ssize_t n):
    cdef const cnp.int64_t[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t r, j, R = y.shape[0], D = y.shape[1]
    out_arr = np.zeros((n, D))
    cdef double[:, ::1] out = out_arr
    for r in range(R):
        for j in range(D):
            out[ix[r], j] += y[r, j]
    return out_arr


def rope_rotate(x, const double[:, ::1] cos, const double[:, ::1] sin):
    xs = np.ascontiguousarray(x)
    shape = xs.shape
    cdef Py_ssize_t N = shape[len(shape) - 2], D = shape[len(shape) - 1]
    cdef const double[:, :, ::1] xv = xs.reshape(-1, N, D)
    cdef Py_ssize_t B = xv.shape[0], b, t, j
    cdef double xe, xo, c, s
    out_arr = np.empty((B, N, D))
    cdef double[:, :, ::1] out = out_arr
    for b in range(B):
        for t in range(N):
            for j in range(D // 2):
                c = cos[t, j]
                s = sin[t, j]
                xe = xv[b, t, 2 * j]
                xo = xv[b, t, 2 * j + 1]
                out[b, t, 2 * j] = xe * c - xo * s
                out[b, t, 2 * j + 1] = xe * s + xo * c
    return out_arr.reshape(shape)


def box_sum(const double[:, ::1] img, Py_ssize_t k):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], i, j
    c_arr = np.zeros((H + 1, W + 1))
    cdef double[:, ::1] c = c_arr
    for i in range(H):
        for j in range(W):
            c[i + 1, j + 1] = img[i, j] + c[i, j + 1] + c[i + 1, j] - c[i, j]
    out_arr = np.empty((H - k + 1, W - k + 1))
    cdef double[:, ::1] out = out_arr
    for i in range(H - k + 1):
        for j in range(W - k + 1):
            out[i, j] = c[i + k, j + k] - c[i, j + k] - c[i + k, j] + c[i, j]
    return out_arr
