"""Pure-numpy scan over ranked gallery indices (fallback backend).

Same contract as the compiled twin in ``_scan_cy``: per query, the rank of
the first same-label hit, the average precision over the valid prefix, and
the relevant-item count. Builds O(block * depth) temporaries, which the
compiled version avoids.
"""

from __future__ import annotations

import numpy as np


def scan_ranked(sorted_idx: np.ndarray, valid_counts: np.ndarray,
                gallery_labels: np.ndarray, query_labels: np.ndarray):
    n_q, depth = sorted_idx.shape
    first = np.full(n_q, -1, dtype=np.int32)
    ap = np.zeros(n_q, dtype=np.float64)
    rel = np.zeros(n_q, dtype=np.int32)
    if n_q == 0 or depth == 0:
        return first, ap, rel

    matches = gallery_labels[sorted_idx] == query_labels[:, None]
    ranks = np.arange(depth)
    matches &= ranks < valid_counts[:, None]

    rel = matches.sum(axis=1).astype(np.int32)
    any_hit = rel > 0
    first = np.where(any_hit, matches.argmax(axis=1), -1).astype(np.int32)

    cum = np.cumsum(matches, axis=1)
    ap_sum = np.where(matches, cum / (ranks + 1.0), 0.0).sum(axis=1)
    ap = np.where(any_hit, ap_sum / np.maximum(rel, 1), 0.0)
    return first, ap, rel
