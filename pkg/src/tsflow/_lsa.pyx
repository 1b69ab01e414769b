# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled shortest-augmenting-path solver for dense square assignment.

Must stay arithmetic-for-arithmetic identical to ``_lsa_py.solve`` so both
backends return the same permutation and duals bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve(double[:, ::1] cost):
    """Return ``(row_to_col, u, v)`` for the minimum-cost perfect matching.

    ``u`` and ``v`` are row/column potentials (length n) with
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on matched pairs.
    """
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    minv_arr = np.empty(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef unsigned char[::1] used = used_arr

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    row_to_col = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u_arr[1:].copy(), v_arr[1:].copy()
