"""Pure numpy implementations of the hot kernels."""

import numpy as np


def apply_tensor_2d(x, m0, m1):
    # contract xi0 (last axis), then xi1
    t = np.matmul(x, m0.T)
    return np.matmul(m1, t)


def apply_tensor_3d(x, m0, m1, m2):
    ne = x.shape[0]
    n2, n1, n0 = x.shape[1], x.shape[2], x.shape[3]
    q0, q1, q2 = m0.shape[0], m1.shape[0], m2.shape[0]
    t0 = np.matmul(x.reshape(ne * n2 * n1, n0), m0.T).reshape(ne, n2, n1, q0)
    t1 = np.einsum("ai,ezix->ezax", m1, t0)
    return np.einsum("bz,ezax->ebax", m2, t1)


def ilu0_factor(indptr, indices, data):
    """Row-wise ILU(0) on CSR arrays (python loop fallback)."""
    n = indptr.shape[0] - 1
    # position of the diagonal entry in each row
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

    col_of = {}
    for i in range(n):
        row_start, row_end = indptr[i], indptr[i + 1]
        col_of.clear()
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
                tgt = col_of.get(j, -1)
                if tgt >= 0:
                    data[tgt] -= lik * data[kidx]
        if abs(data[diag_pos[i]]) < 1e-300:
            return i
    return -1
