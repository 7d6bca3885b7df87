# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mixture kernels.

Same contracts as ``_kernels_np``: isotropic Gaussian mixtures given as
(weights (K,), means (K, d), variances (K,)) evaluated at points x (n, d),
with log-sum-exp stabilization throughout.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef inline void _log_components_row(
    const double[::1] w,
    const double[:, ::1] means,
    const double[::1] var,
    const double[:, ::1] x,
    Py_ssize_t n_idx,
    double[::1] scratch,
) noexcept nogil:
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t d = means.shape[1]
    cdef Py_ssize_t i, j
    cdef double sq, diff
    for i in range(K):
        sq = 0.0
        for j in range(d):
            diff = x[n_idx, j] - means[i, j]
            sq += diff * diff
        scratch[i] = log(w[i]) - 0.5 * (d * (LOG_2PI + log(var[i])) + sq / var[i])


def mixture_logpdf(
    const double[::1] weights,
    const double[:, ::1] means,
    const double[::1] variances,
    const double[:, ::1] x,
):
    """Log-density of the mixture at each row of x, shape (n,)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t K = weights.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] out_v = out
    cdef double[::1] scratch = np.empty(K, dtype=np.float64)
    cdef Py_ssize_t p, i
    cdef double m, acc
    with nogil:
        for p in range(n):
            _log_components_row(weights, means, variances, x, p, scratch)
            m = scratch[0]
            for i in range(1, K):
                if scratch[i] > m:
                    m = scratch[i]
            acc = 0.0
            for i in range(K):
                acc += exp(scratch[i] - m)
            out_v[p] = m + log(acc)
    return out


def mixture_responsibilities(
    const double[::1] weights,
    const double[:, ::1] means,
    const double[::1] variances,
    const double[:, ::1] x,
):
    """Posterior component probabilities at each row of x, shape (n, K)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t K = weights.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    cdef double[::1] scratch = np.empty(K, dtype=np.float64)
    cdef Py_ssize_t p, i
    cdef double m, acc
    with nogil:
        for p in range(n):
            _log_components_row(weights, means, variances, x, p, scratch)
            m = scratch[0]
            for i in range(1, K):
                if scratch[i] > m:
                    m = scratch[i]
            acc = 0.0
            for i in range(K):
                scratch[i] = exp(scratch[i] - m)
                acc += scratch[i]
            for i in range(K):
                out_v[p, i] = scratch[i] / acc
    return out


def mixture_score(
    const double[::1] weights,
    const double[:, ::1] means,
    const double[::1] variances,
    const double[:, ::1] x,
):
    """Gradient of the mixture log-density at each row of x, shape (n, d)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t K = weights.shape[0]
    cdef Py_ssize_t d = means.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    cdef double[::1] scratch = np.empty(K, dtype=np.float64)
    cdef Py_ssize_t p, i, j
    cdef double m, acc, coef, csum
    with nogil:
        for p in range(n):
            _log_components_row(weights, means, variances, x, p, scratch)
            m = scratch[0]
            for i in range(1, K):
                if scratch[i] > m:
                    m = scratch[i]
            acc = 0.0
            for i in range(K):
                scratch[i] = exp(scratch[i] - m)
                acc += scratch[i]
            for j in range(d):
                out_v[p, j] = 0.0
            csum = 0.0
            for i in range(K):
                coef = scratch[i] / (acc * variances[i])
                csum += coef
                for j in range(d):
                    out_v[p, j] += coef * means[i, j]
            for j in range(d):
                out_v[p, j] -= csum * x[p, j]
    return out
