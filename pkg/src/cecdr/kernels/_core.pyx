# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror ``_fallback`` exactly, down to the bit:
dot products accumulate left to right and the build disables FP contraction."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


cdef inline Py_ssize_t _upper_bound(const double[::1] s, double x) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = s.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if s[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline double _dot(const double[:, ::1] e, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k, d = e.shape[1]
    cdef double acc = 0.0
    for k in range(d):
        acc = acc + e[i, k] * e[j, k]
    return acc


def ecdf(const double[::1] sorted_samples, const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double m = <double>sorted_samples.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _upper_bound(sorted_samples, x[i]) / m
    return out


def pair_dots(const double[:, ::1] emb, const int64_t[::1] ia, const int64_t[::1] ib):
    cdef Py_ssize_t n = ia.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _dot(emb, ia[i], ib[i])
    return out


def sequence_similarity(const double[:, ::1] emb_c, const double[:, ::1] emb_b,
                        const double[::1] cal_c, const double[::1] cal_b,
                        const int64_t[::1] offsets, const int64_t[::1] items,
                        const int64_t[::1] targets, bint use_c, bint use_b):
    cdef Py_ssize_t n = targets.shape[0], j, p
    cdef double mc = <double>cal_c.shape[0], mb = <double>cal_b.shape[0]
    cdef double bc, bb, fc, fb, best
    cdef int64_t t, it
    fused = np.zeros(n, dtype=np.float64)
    seq_c = np.zeros(n, dtype=np.float64)
    seq_b = np.zeros(n, dtype=np.float64)
    cdef double[::1] of = fused, oc = seq_c, ob = seq_b
    with nogil:
        for j in range(n):
            t = targets[j]
            bc = 0.0
            bb = 0.0
            for p in range(offsets[j], offsets[j + 1]):
                it = items[p]
                fc = _upper_bound(cal_c, _dot(emb_c, it, t)) / mc
                fb = _upper_bound(cal_b, _dot(emb_b, it, t)) / mb
                if fc > bc:
                    bc = fc
                if fb > bb:
                    bb = fb
            oc[j] = bc
            ob[j] = bb
            best = 0.0
            if use_c and bc > best:
                best = bc
            if use_b and bb > best:
                best = bb
            of[j] = best
    return fused, seq_c, seq_b


def holdout_ranks(const double[:, ::1] scores, const int64_t[::1] item_ids,
                  const int64_t[::1] holdout_col, const unsigned char[:, ::1] valid):
    cdef Py_ssize_t u, c, nu = scores.shape[0], nc = scores.shape[1]
    cdef double sh
    cdef int64_t idh, cnt
    out = np.empty(nu, dtype=np.int64)
    cdef int64_t[::1] o = out
    with nogil:
        for u in range(nu):
            sh = scores[u, holdout_col[u]]
            idh = item_ids[holdout_col[u]]
            cnt = 0
            for c in range(nc):
                if valid[u, c] and (scores[u, c] > sh or (scores[u, c] == sh and item_ids[c] < idh)):
                    cnt += 1
            o[u] = cnt + 1
    return out
