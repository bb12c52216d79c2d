# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled KPSS and CRPS kernels. Signatures match ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def kpss_statistics(series, Py_ssize_t lags):
    cdef double[:, ::1] x = np.ascontiguousarray(np.atleast_2d(series), dtype=np.float64)
    cdef Py_ssize_t s_count = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    out_arr = np.zeros(s_count, dtype=np.float64)
    resid_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] e = resid_arr
    cdef Py_ssize_t s, t, k
    cdef double mean, partial, eta, lrv, acc, weight
    with nogil:
        for s in range(s_count):
            mean = 0.0
            for t in range(n):
                mean += x[s, t]
            mean /= n
            partial = 0.0
            eta = 0.0
            lrv = 0.0
            for t in range(n):
                e[t] = x[s, t] - mean
                partial += e[t]
                eta += partial * partial
                lrv += e[t] * e[t]
            eta /= <double>n * <double>n
            for k in range(1, lags + 1):
                weight = 1.0 - k / (lags + 1.0)
                acc = 0.0
                for t in range(k, n):
                    acc += e[t] * e[t - k]
                lrv += 2.0 * weight * acc
            lrv /= n
            if lrv > 0.0:
                out[s] = eta / lrv
    return out_arr


def crps_ensemble(members, actual):
    # sorting is delegated to numpy; cells become rows so each sorted ensemble is contiguous
    sorted_arr = np.ascontiguousarray(np.asarray(members, dtype=np.float64).T)
    sorted_arr.sort(axis=1)
    cdef double[:, ::1] xs = sorted_arr
    cdef double[::1] y = np.ascontiguousarray(actual, dtype=np.float64)
    cdef Py_ssize_t cells = xs.shape[0]
    cdef Py_ssize_t m = xs.shape[1]
    out_arr = np.empty(cells, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t col, i
    cdef double acc, spread
    with nogil:
        for col in range(cells):
            acc = 0.0
            spread = 0.0
            for i in range(m):
                acc += fabs(xs[col, i] - y[col])
                spread += (2.0 * (i + 1) - m - 1.0) * xs[col, i]
            out[col] = acc / m - spread / (<double>m * <double>m)
    return out_arr
