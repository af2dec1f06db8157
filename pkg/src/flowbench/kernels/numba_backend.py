"""Numba-compiled implementations of the hot kernels."""

import numpy as np
from numba import njit


@njit(cache=True)
def apply_tensor_2d(x, m0, m1):
    ne, n1, n0 = x.shape
    q0 = m0.shape[0]
    q1 = m1.shape[0]
    out = np.empty((ne, q1, q0), dtype=np.float64)
    t = np.empty((n1, q0), dtype=np.float64)
    for e in range(ne):
        for i in range(n1):
            for b in range(q0):
                acc = 0.0
                for j in range(n0):
                    acc += m0[b, j] * x[e, i, j]
                t[i, b] = acc
        for a in range(q1):
            for b in range(q0):
                acc = 0.0
                for i in range(n1):
                    acc += m1[a, i] * t[i, b]
                out[e, a, b] = acc
    return out


@njit(cache=True)
def apply_tensor_3d(x, m0, m1, m2):
    ne, n2, n1, n0 = x.shape
    q0 = m0.shape[0]
    q1 = m1.shape[0]
    q2 = m2.shape[0]
    out = np.empty((ne, q2, q1, q0), dtype=np.float64)
    t0 = np.empty((n2, n1, q0), dtype=np.float64)
    t1 = np.empty((n2, q1, q0), dtype=np.float64)
    for e in range(ne):
        for k in range(n2):
            for i in range(n1):
                for b in range(q0):
                    acc = 0.0
                    for j in range(n0):
                        acc += m0[b, j] * x[e, k, i, j]
                    t0[k, i, b] = acc
        for k in range(n2):
            for a in range(q1):
                for b in range(q0):
                    acc = 0.0
                    for i in range(n1):
                        acc += m1[a, i] * t0[k, i, b]
                    t1[k, a, b] = acc
        for c in range(q2):
            for a in range(q1):
                for b in range(q0):
                    acc = 0.0
                    for k in range(n2):
                        acc += m2[c, k] * t1[k, a, b]
                    out[e, c, a, b] = acc
    return out


@njit(cache=True)
def ilu0_factor(indptr, indices, data):
    n = indptr.shape[0] - 1
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        found = -1
        for idx in range(indptr[i], indptr[i + 1]):
            if indices[idx] == i:
                found = idx
                break
        if found < 0:
            return i
        diag_pos[i] = found

    # scratch map from column index to position within the current row
    col_of = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        row_start = indptr[i]
        row_end = indptr[i + 1]
        for idx in range(row_start, row_end):
            col_of[indices[idx]] = idx
        for idx in range(row_start, row_end):
            k = indices[idx]
            if k >= i:
                break
            piv = data[diag_pos[k]]
            if abs(piv) < 1e-300:
                return k
            lik = data[idx] / piv
            data[idx] = lik
            for kidx in range(diag_pos[k] + 1, indptr[k + 1]):
                j = indices[kidx]
                tgt = col_of[j]
                if tgt >= 0:
                    data[tgt] -= lik * data[kidx]
        for idx in range(row_start, row_end):
            col_of[indices[idx]] = -1
        if abs(data[diag_pos[i]]) < 1e-300:
            return i
    return -1
