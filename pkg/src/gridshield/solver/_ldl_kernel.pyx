# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Sparse LDL^T factorization of symmetric quasidefinite matrices.

Up-looking factorization driven by the elimination tree; the input is the
upper-triangular part of the (already permuted and regularized) matrix in CSC
form.  No pivoting is performed: quasidefinite matrices admit a stable signed
Cholesky once a small diagonal regularization is in place, and the expected
pivot signs are supplied so that tiny or sign-flipped pivots can be clamped.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def etree_symbolic(int n, cnp.int32_t[::1] Ap, cnp.int32_t[::1] Ai):
    """Elimination tree and column counts of L for an upper CSC pattern."""
    cdef cnp.ndarray[cnp.int32_t, ndim=1] parent_arr = np.empty(n, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] lnz_arr = np.zeros(n, dtype=np.int32)
    cdef cnp.int32_t[::1] parent = parent_arr
    cdef cnp.int32_t[::1] lnz = lnz_arr
    cdef cnp.ndarray[cnp.int32_t, ndim=1] flag_arr = np.empty(n, dtype=np.int32)
    cdef cnp.int32_t[::1] flag = flag_arr
    cdef int j, p, i

    for j in range(n):
        parent[j] = -1
        flag[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            while i < j and flag[i] != j:
                if parent[i] == -1:
                    parent[i] = j
                lnz[i] += 1
                flag[i] = j
                i = parent[i]
    return parent_arr, lnz_arr


def factorize(int n,
              cnp.int32_t[::1] Ap, cnp.int32_t[::1] Ai, cnp.float64_t[::1] Ax,
              cnp.int32_t[::1] parent, cnp.int32_t[::1] Lp,
              cnp.int32_t[::1] Li, cnp.float64_t[::1] Lx,
              cnp.float64_t[::1] D,
              cnp.float64_t[::1] sign, double pivot_floor):
    """Numeric LDL^T.  Fills Li, Lx, D in place; returns the number of pivots
    that had to be clamped to ``sign * pivot_floor``."""
    cdef cnp.ndarray[cnp.int32_t, ndim=1] lnz_arr = np.zeros(n, dtype=np.int32)
    cdef cnp.int32_t[::1] lnz = lnz_arr
    cdef cnp.ndarray[cnp.int32_t, ndim=1] pattern_arr = np.empty(n, dtype=np.int32)
    cdef cnp.int32_t[::1] pattern = pattern_arr
    cdef cnp.ndarray[cnp.int32_t, ndim=1] flag_arr = np.empty(n, dtype=np.int32)
    cdef cnp.int32_t[::1] flag = flag_arr
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.float64_t[::1] y = y_arr
    cdef int k, p, i, top, length, p2
    cdef double yi, l_ki, dk
    cdef int clamped = 0

    for k in range(n):
        y[k] = 0.0
        top = n
        flag[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i > k:
                continue
            y[i] += Ax[p]
            length = 0
            while flag[i] != k:
                pattern[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                length -= 1
                top -= 1
                pattern[top] = pattern[length]
        dk = y[k]
        y[k] = 0.0
        while top < n:
            i = pattern[top]
            top += 1
            yi = y[i]
            y[i] = 0.0
            p2 = Lp[i] + lnz[i]
            for p in range(Lp[i], p2):
                y[Li[p]] -= Lx[p] * yi
            l_ki = yi / D[i]
            dk -= l_ki * yi
            Li[p2] = k
            Lx[p2] = l_ki
            lnz[i] += 1
        if sign[k] * dk < pivot_floor:
            dk = sign[k] * pivot_floor
            clamped += 1
        D[k] = dk
    return clamped


def solve(int n,
          cnp.int32_t[::1] Lp, cnp.int32_t[::1] Li, cnp.float64_t[::1] Lx,
          cnp.float64_t[::1] D, cnp.float64_t[::1] x):
    """In-place solve of L D L^T x = b (x holds b on entry)."""
    cdef int j, p
    for j in range(n):
        for p in range(Lp[j], Lp[j + 1]):
            x[Li[p]] -= Lx[p] * x[j]
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j], Lp[j + 1]):
            x[j] -= Lx[p] * x[Li[p]]
