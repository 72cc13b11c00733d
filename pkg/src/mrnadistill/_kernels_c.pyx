# Fused C implementations of the hot training kernels.
#
# Same contracts as mrnadistill._kernels_py; one pass per kernel instead
# of a chain of numpy temporaries.  Supports float32 and float64 via the
# fused `floating` type.

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport sqrt, pow

cnp.import_array()

ctypedef fused floating:
    float
    double


def layer_norm_forward(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, mu, var, rs, xh
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j]
        mu = acc / d
        acc = 0.0
        for j in range(d):
            acc += (x[i, j] - mu) * (x[i, j] - mu)
        var = acc / d
        rs = 1.0 / sqrt(var + eps)
        mean[i] = <floating> mu
        rstd[i] = <floating> rs
        for j in range(d):
            xh = (x[i, j] - mu) * rs
            y[i, j] = <floating> (xh * gain[j] + bias[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] gain,
                        floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mu, rs, xh, dxh, m1, m2
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=dtype)
    dbias_arr = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef floating[::1] dgain = dgain_arr
    cdef floating[::1] dbias = dbias_arr
    for i in range(n):
        mu = mean[i]
        rs = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * rs
            dxh = dy[i, j] * gain[j]
            dbias[j] += dy[i, j]
            dgain[j] += <floating> (dy[i, j] * xh)
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * rs
            dxh = dy[i, j] * gain[j]
            dx[i, j] = <floating> (rs * (dxh - m1 - xh * m2))
    return dx_arr, dgain_arr, dbias_arr


def adamw_update(floating[::1] param, floating[::1] grad, floating[::1] m, floating[::1] v,
                 long step, double lr, double beta1, double beta2, double eps,
                 double weight_decay):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double g, mi, vi
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    for i in range(n):
        g = grad[i]
        mi = beta1 * <double> m[i] + (1.0 - beta1) * g
        vi = beta2 * <double> v[i] + (1.0 - beta2) * g * g
        m[i] = <floating> mi
        v[i] = <floating> vi
        param[i] = <floating> (param[i] - lr * ((mi / bc1) / (sqrt(vi / bc2) + eps)
                                                + weight_decay * param[i]))


def embedding_grad(long[::1] ids, floating[:, ::1] dy, floating[:, ::1] dtable):
    cdef Py_ssize_t n = ids.shape[0], d = dy.shape[1]
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = ids[i]
        for j in range(d):
            dtable[row, j] += dy[i, j]
