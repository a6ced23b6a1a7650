# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan over ranked gallery indices (hot retrieval kernel).

One nogil pass per query row: first same-label rank, average precision
over the valid prefix, relevant-item count. Contract mirrors
``_scan_np.scan_ranked``.
"""

import numpy as np

cimport numpy as cnp


def scan_ranked(const cnp.int32_t[:, ::1] sorted_idx,
                const cnp.int32_t[:] valid_counts,
                const cnp.int64_t[:] gallery_labels,
                const cnp.int64_t[:] query_labels):
    cdef Py_ssize_t n_q = sorted_idx.shape[0]
    first_arr = np.full(n_q, -1, dtype=np.int32)
    ap_arr = np.zeros(n_q, dtype=np.float64)
    rel_arr = np.zeros(n_q, dtype=np.int32)
    if n_q == 0:
        return first_arr, ap_arr, rel_arr

    cdef cnp.int32_t[:] first = first_arr
    cdef cnp.float64_t[:] ap = ap_arr
    cdef cnp.int32_t[:] rel = rel_arr
    cdef Py_ssize_t q, j, n_valid
    cdef cnp.int64_t label
    cdef int seen
    cdef double ap_sum

    with nogil:
        for q in range(n_q):
            n_valid = valid_counts[q]
            label = query_labels[q]
            seen = 0
            ap_sum = 0.0
            for j in range(n_valid):
                if gallery_labels[sorted_idx[q, j]] == label:
                    if seen == 0:
                        first[q] = <cnp.int32_t> j
                    seen += 1
                    ap_sum += seen / (<double> (j + 1))
            rel[q] = seen
            if seen > 0:
                ap[q] = ap_sum / seen
    return first_arr, ap_arr, rel_arr
