# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot inner loops (strided 1-D conv, GELU).

Semantics match kernels.pykernels exactly up to float summation order.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

NAME = "compiled"

cdef double _SQRT2 = sqrt(2.0)
cdef double _INV_SQRT_2PI = 1.0 / sqrt(2.0 * 3.14159265358979323846)


def conv1d_forward(double[:, ::1] x, double[:, :, ::1] w, int stride, int pad, int groups):
    cdef Py_ssize_t c_in = x.shape[0]
    cdef Py_ssize_t t = x.shape[1]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t c_in_g = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t_out = (t + 2 * pad - k) // stride + 1
    out_arr = np.zeros((c_out, t_out), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t cpg = c_out // groups
    cdef Py_ssize_t co, ci, ci0, tt, kk, p, pos0
    cdef double acc
    with nogil:
        for co in range(c_out):
            ci0 = (co // cpg) * c_in_g
            for tt in range(t_out):
                pos0 = tt * stride - pad
                acc = 0.0
                for ci in range(c_in_g):
                    for kk in range(k):
                        p = pos0 + kk
                        if 0 <= p < t:
                            acc += x[ci0 + ci, p] * w[co, ci, kk]
                out[co, tt] = acc
    return out_arr


def conv1d_backward(double[:, ::1] x, double[:, :, ::1] w, double[:, ::1] grad_out,
                    int stride, int pad, int groups):
    cdef Py_ssize_t c_in = x.shape[0]
    cdef Py_ssize_t t = x.shape[1]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t c_in_g = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t_out = grad_out.shape[1]
    grad_x_arr = np.zeros((c_in, t), dtype=np.float64)
    grad_w_arr = np.zeros((c_out, c_in_g, k), dtype=np.float64)
    cdef double[:, ::1] gx = grad_x_arr
    cdef double[:, :, ::1] gw = grad_w_arr
    cdef Py_ssize_t cpg = c_out // groups
    cdef Py_ssize_t co, ci, ci0, tt, kk, p, pos0
    cdef double go
    with nogil:
        for co in range(c_out):
            ci0 = (co // cpg) * c_in_g
            for tt in range(t_out):
                pos0 = tt * stride - pad
                go = grad_out[co, tt]
                if go == 0.0:
                    continue
                for ci in range(c_in_g):
                    for kk in range(k):
                        p = pos0 + kk
                        if 0 <= p < t:
                            gx[ci0 + ci, p] += go * w[co, ci, kk]
                            gw[co, ci, kk] += go * x[ci0 + ci, p]
    return grad_x_arr, grad_w_arr


def gelu_forward(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty_like(arr)
    cdef double[::1] xi = arr.reshape(-1)
    cdef double[::1] yo = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xi.shape[0]
    with nogil:
        for i in range(n):
            yo[i] = 0.5 * xi[i] * (1.0 + erf(xi[i] / _SQRT2))
    return out_arr


def gelu_backward(x, grad_out):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    g_arr = np.ascontiguousarray(grad_out, dtype=np.float64)
    out_arr = np.empty_like(arr)
    cdef double[::1] xi = arr.reshape(-1)
    cdef double[::1] gi = g_arr.reshape(-1)
    cdef double[::1] yo = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xi.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = xi[i]
            yo[i] = gi[i] * (0.5 * (1.0 + erf(v / _SQRT2)) + v * exp(-0.5 * v * v) * _INV_SQRT_2PI)
    return out_arr
