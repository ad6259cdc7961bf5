# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-query scan over ranked gallery indices."""
import numpy as np

from libc.stdint cimport int64_t


def evaluate_order(const int64_t[:, ::1] order, const int64_t[::1] q_ids, const int64_t[::1] g_ids,
                   const int64_t[::1] q_cams, const int64_t[::1] g_cams, bint cam_filter=True):
    cdef Py_ssize_t num_q = order.shape[0]
    cdef Py_ssize_t num_g = order.shape[1]
    first = np.full(num_q, -1, dtype=np.int64)
    ap = np.full(num_q, np.nan, dtype=np.float64)
    nrel = np.zeros(num_q, dtype=np.int64)
    cdef int64_t[::1] first_v = first
    cdef double[::1] ap_v = ap
    cdef int64_t[::1] nrel_v = nrel
    cdef Py_ssize_t i, r, g
    cdef int64_t qid, qcam, pos, hits
    cdef double prec_sum
    for i in range(num_q):
        qid = q_ids[i]
        qcam = q_cams[i]
        pos = 0
        hits = 0
        prec_sum = 0.0
        for r in range(num_g):
            g = order[i, r]
            if cam_filter and g_ids[g] == qid and g_cams[g] == qcam:
                continue
            pos += 1
            if g_ids[g] == qid:
                hits += 1
                if hits == 1:
                    first_v[i] = pos - 1
                prec_sum += <double>hits / <double>pos
        if hits > 0:
            ap_v[i] = prec_sum / hits
            nrel_v[i] = hits
    return first, ap, nrel
