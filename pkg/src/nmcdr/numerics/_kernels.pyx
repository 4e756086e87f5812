# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for sparse aggregation and per-segment softmax.

Every routine here has a numpy twin in ``_kernels_py`` with the same
signature; ``kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def csr_spmm(const cnp.int64_t[:] indptr, const cnp.int64_t[:] indices, const double[:] data,
             x_in, Py_ssize_t n_rows):
    """out[r] = sum_k data[k] * x[indices[k]] for k in row r."""
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, k, j
    cdef double w
    cdef double *orow
    cdef const double *xrow
    if d == 0:
        return out_arr
    with nogil:
        for r in range(n_rows):
            orow = &out[r, 0]
            for k in range(indptr[r], indptr[r + 1]):
                w = data[k]
                xrow = &x[indices[k], 0]
                for j in range(d):
                    orow[j] += w * xrow[j]
    return out_arr


def scatter_add_rows(x_in, const cnp.int64_t[:] idx, Py_ssize_t n_rows):
    """out[idx[i]] += x[i]; the adjoint of a row gather."""
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double *orow
    cdef const double *xrow
    if d == 0:
        return out_arr
    with nogil:
        for i in range(n):
            orow = &out[idx[i], 0]
            xrow = &x[i, 0]
            for j in range(d):
                orow[j] += xrow[j]
    return out_arr


def segment_softmax(const double[:] s, const cnp.int64_t[:] indptr):
    """Softmax of ``s`` restricted to each [indptr[g], indptr[g+1]) block."""
    cdef Py_ssize_t n_seg = indptr.shape[0] - 1
    out_arr = np.empty(s.shape[0], dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t g, k
    cdef double m, z
    with nogil:
        for g in range(n_seg):
            if indptr[g + 1] == indptr[g]:
                continue
            m = s[indptr[g]]
            for k in range(indptr[g] + 1, indptr[g + 1]):
                if s[k] > m:
                    m = s[k]
            z = 0.0
            for k in range(indptr[g], indptr[g + 1]):
                out[k] = exp(s[k] - m)
                z += out[k]
            for k in range(indptr[g], indptr[g + 1]):
                out[k] /= z
    return out_arr


def segment_softmax_backward(const double[:] alpha, const double[:] grad,
                             const cnp.int64_t[:] indptr):
    cdef Py_ssize_t n_seg = indptr.shape[0] - 1
    out_arr = np.empty(alpha.shape[0], dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t g, k
    cdef double dot
    with nogil:
        for g in range(n_seg):
            dot = 0.0
            for k in range(indptr[g], indptr[g + 1]):
                dot += alpha[k] * grad[k]
            for k in range(indptr[g], indptr[g + 1]):
                out[k] = alpha[k] * (grad[k] - dot)
    return out_arr
