"""Numpy/scipy implementations of the hot kernels.

Signatures match the compiled ``_kernels`` module exactly.
"""
import numpy as np
import scipy.sparse as sp


def csr_spmm(indptr, indices, data, x, n_rows):
    a = sp.csr_matrix((data, indices, indptr), shape=(n_rows, x.shape[0]))
    return np.asarray(a @ x)


def scatter_add_rows(x, idx, n_rows):
    out = np.zeros((n_rows, x.shape[1]))
    np.add.at(out, idx, x)
    return out


def _segment_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def segment_softmax(s, indptr):
    seg = _segment_ids(indptr)
    nonempty = indptr[:-1] < indptr[1:]
    m = np.full(len(indptr) - 1, -np.inf)
    m[nonempty] = np.maximum.reduceat(s, indptr[:-1][nonempty])
    e = np.exp(s - m[seg])
    z = np.zeros(len(indptr) - 1)
    z[nonempty] = np.add.reduceat(e, indptr[:-1][nonempty])
    return e / z[seg]


def segment_softmax_backward(alpha, grad, indptr):
    seg = _segment_ids(indptr)
    nonempty = indptr[:-1] < indptr[1:]
    dot = np.zeros(len(indptr) - 1)
    dot[nonempty] = np.add.reduceat(alpha * grad, indptr[:-1][nonempty])
    return alpha * (grad - dot[seg])
