# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def rasterize_blocks(tops, lefts, heights, widths, int g_r, int g_c, long need):
    cdef long[:] t = np.ascontiguousarray(tops, dtype=np.int_)
    cdef long[:] l = np.ascontiguousarray(lefts, dtype=np.int_)
    cdef long[:] h = np.ascontiguousarray(heights, dtype=np.int_)
    cdef long[:] w = np.ascontiguousarray(widths, dtype=np.int_)
    out = np.zeros((g_r, g_c), dtype=np.uint8)
    cdef unsigned char[:, :] m = out
    cdef Py_ssize_t n = t.shape[0], i, r, c
    cdef long r0, r1, c0, c1, count = 0, used = 0
    for i in range(n):
        if count >= need:
            break
        used += 1
        r0 = t[i] if t[i] > 0 else 0
        r1 = t[i] + h[i] if t[i] + h[i] < g_r else g_r
        c0 = l[i] if l[i] > 0 else 0
        c1 = l[i] + w[i] if l[i] + w[i] < g_c else g_c
        for r in range(r0, r1):
            for c in range(c0, c1):
                if m[r, c] == 0:
                    m[r, c] = 1
                    count += 1
    return out, used


def auc_pair_counts(pos, neg):
    cdef double[:] p = np.ascontiguousarray(pos, dtype=np.float64)
    cdef double[:] q = np.ascontiguousarray(neg, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef long long wins = 0, ties = 0
    for i in range(p.shape[0]):
        for j in range(q.shape[0]):
            if p[i] > q[j]:
                wins += 1
            elif p[i] == q[j]:
                ties += 1
    return int(wins), int(ties)


def concordance_counts(time, event, risk):
    cdef double[:] t = np.ascontiguousarray(time, dtype=np.float64)
    cdef unsigned char[:] e = np.ascontiguousarray(np.asarray(event).astype(bool), dtype=np.uint8)
    cdef double[:] r = np.ascontiguousarray(risk, dtype=np.float64)
    cdef Py_ssize_t i, j, n = t.shape[0]
    cdef long long conc = 0, tied = 0, comp = 0
    for i in range(n):
        if not e[i]:
            continue
        for j in range(n):
            if t[j] > t[i]:
                comp += 1
                if r[i] > r[j]:
                    conc += 1
                elif r[i] == r[j]:
                    tied += 1
    return int(conc), int(tied), int(comp)
