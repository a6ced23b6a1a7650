"""Brute-force-exact nearest-neighbor ranking and the CMC/mAP metrics.

Distances use the expansion ||a-b||^2 = ||a||^2 + ||b||^2 - 2ab with
precomputed norms and blocked matrix products; rankings are stable-sorted
so exact ties break by ascending gallery index. The per-row metric scan
runs on a compiled kernel when available and on a vectorized numpy
fallback otherwise; select with ``use_backend`` or FEATFILL_PURE=1.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _scan_np
from .core import FeatureSet

try:
    from . import _scan_cy
except ImportError:
    _scan_cy = None

DISTANCE_KINDS = ("l2", "cosine")

_METRIC_RE = re.compile(r"^cmc_top(\d+)$")

_backend = "auto"


def use_backend(name: str) -> None:
    """Force the scan backend: "compiled", "pure", or "auto"."""
    if name not in ("auto", "pure", "compiled"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _scan_cy is None:
        raise RuntimeError("compiled scan kernel is not built")
    global _backend
    _backend = name


def active_backend() -> str:
    if _backend == "pure":
        return "pure"
    if _backend == "compiled":
        return "compiled"
    if os.environ.get("FEATFILL_PURE") == "1" or _scan_cy is None:
        return "pure"
    return "compiled"


def _scan(sorted_idx, valid_counts, gallery_labels, query_labels):
    kernel = _scan_cy if active_backend() == "compiled" else _scan_np
    return kernel.scan_ranked(
        np.ascontiguousarray(sorted_idx, dtype=np.int32),
        np.ascontiguousarray(valid_counts, dtype=np.int32),
        np.ascontiguousarray(gallery_labels, dtype=np.int64),
        np.ascontiguousarray(query_labels, dtype=np.int64),
    )


@dataclass
class RetrievalResult:
    """Ranked gallery indices per query, ascending distance.

    ``indices[q, :valid_counts[q]]`` are the retrievable items; entries
    past that (present only near full depth) are same-id exclusions pushed
    to the end of the row.
    """

    indices: np.ndarray  # (n_q, depth) int32
    valid_counts: np.ndarray  # (n_q,) int32
    n_gallery: int
    depth: int
    query_labels: np.ndarray
    query_ids: np.ndarray
    distance: str

    def __len__(self) -> int:
        return self.indices.shape[0]


def _check_sets(gallery: FeatureSet, query: FeatureSet, dist: str) -> None:
    if dist not in DISTANCE_KINDS:
        raise ValueError(f"distance must be one of {DISTANCE_KINDS}")
    if gallery.dim != query.dim:
        raise ValueError(
            f"dimension mismatch: gallery {gallery.dim} vs query {query.dim}"
        )


def _prepared_vectors(fs: FeatureSet, dist: str, side: str) -> np.ndarray:
    v = fs.vectors.astype(np.float64)
    if dist == "cosine":
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0.0):
            raise ValueError(f"cosine distance requires nonzero {side} vectors")
        v = v / norms[:, None]
    return v


def _exclusion_columns(gallery: FeatureSet, query: FeatureSet,
                       exclude_same_id: bool) -> np.ndarray:
    """Per-query gallery row holding the same record id, -1 if absent."""
    cols = np.full(len(query), -1, dtype=np.int64)
    if exclude_same_id and len(gallery):
        lookup = gallery.id_to_row()
        for i, qid in enumerate(query.ids):
            cols[i] = lookup.get(int(qid), -1)
    return cols


def _block_ranges(n: int, n_gallery: int, workers: int):
    # ~64 MB of f64 distances per block, and enough blocks to feed workers.
    block = max(1, min(n, 8_000_000 // max(n_gallery, 1)))
    if workers > 1 and n > 0:
        block = min(block, max(1, -(-n // (workers * 4))))
    return [(s, min(s + block, n)) for s in range(0, n, block)]


def _run_blt(fn, ranges, workers: int) -> None:
    if workers <= 1 or len(ranges) <= 1:
        for r in ranges:
            fn(r)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, ranges))


def rank(gallery: FeatureSet, query: FeatureSet, dist: str = "l2",
         exclude_same_id: bool = True, depth: int | None = None,
         workers: int = 1) -> RetrievalResult:
    """Exact ranking of the gallery for every query.

    Ties on distance break by ascending gallery index. ``exclude_same_id``
    drops the gallery record carrying the query's own id (it sorts to the
    end of the row and is not counted as retrievable).
    """
    _check_sets(gallery, query, dist)
    n_g, n_q = len(gallery), len(query)
    if depth is None:
        depth = n_g
    if not 1 <= depth <= n_g:
        raise ValueError(f"depth must be in [1, {n_g}], got {depth}")

    g = _prepared_vectors(gallery, dist, "gallery")
    q = _prepared_vectors(query, dist, "query")
    g_sq = np.einsum("ij,ij->i", g, g) if dist == "l2" else None
    excl = _exclusion_columns(gallery, query, exclude_same_id)

    indices = np.empty((n_q, depth), dtype=np.int32)
    valid = np.empty(n_q, dtype=np.int32)

    def do_block(rg):
        s, e = rg
        d_blk = _distance_block(q[s:e], g, g_sq, dist)
        rows = np.nonzero(excl[s:e] >= 0)[0]
        d_blk[rows, excl[s:e][rows]] = np.inf
        order = np.argsort(d_blk, axis=1, kind="stable")
        indices[s:e] = order[:, :depth]
        valid[s:e] = np.minimum(depth, n_g - (excl[s:e] >= 0))

    _run_blt(do_block, _block_ranges(n_q, n_g, workers), workers)
    return RetrievalResult(
        indices=indices,
        valid_counts=valid,
        n_gallery=n_g,
        depth=depth,
        query_labels=query.labels,
        query_ids=query.ids,
        distance=dist,
    )


def _distance_block(q_blk: np.ndarray, g: np.ndarray, g_sq,
                    dist: str) -> np.ndarray:
    if dist == "l2":
        q_sq = np.einsum("ij,ij->i", q_blk, q_blk)
        d = q_blk @ g.T
        d *= -2.0
        d += q_sq[:, None]
        d += g_sq[None, :]
        return d
    return 1.0 - q_blk @ g.T


def cmc_top_k(result: RetrievalResult, gallery_labels, k: int) -> float:
    """Fraction of queries with a same-label item among their top k."""
    if not 1 <= k <= result.depth:
        raise ValueError(f"k must be in [1, {result.depth}], got {k}")
    if len(result) == 0:
        return 0.0
    first, _, _ = _scan(
        result.indices, result.valid_counts, gallery_labels, result.query_labels
    )
    return float(((first >= 0) & (first < k)).mean())


@dataclass
class MapDetails:
    per_query_ap: np.ndarray
    has_relevant: np.ndarray
    skipped: int


def mean_average_precision(result: RetrievalResult, gallery_labels,
                           return_details: bool = False):
    """Mean over queries of the discrete precision-at-relevant-ranks AP.

    Requires a full-depth ranking. Queries with no same-label gallery item
    are skipped from the mean; their count is reported in the details.
    """
    if result.depth != result.n_gallery:
        raise ValueError("mean_average_precision requires a full-depth ranking")
    first, ap, rel = _scan(
        result.indices, result.valid_counts, gallery_labels, result.query_labels
    )
    has_rel = rel > 0
    value = float(ap[has_rel].mean()) if has_rel.any() else 0.0
    if return_details:
        return value, MapDetails(
            per_query_ap=ap, has_relevant=has_rel, skipped=int((~has_rel).sum())
        )
    return value


@dataclass
class EvalStats:
    """Per-query retrieval outcomes from one fused full-depth evaluation."""

    first_rank: np.ndarray
    ap: np.ndarray
    rel_count: np.ndarray
    n_gallery: int
    n_queries: int

    def metric_value(self, name: str, mask=None) -> float:
        m = _METRIC_RE.match(name)
        if m:
            k = int(m.group(1))
            if not 1 <= k <= self.n_gallery:
                raise ValueError(f"k out of range in metric {name!r}")
            hits = (self.first_rank >= 0) & (self.first_rank < k)
            hits = hits if mask is None else hits[mask]
            return float(hits.mean()) if hits.size else 0.0
        if name == "map":
            has_rel = self.rel_count > 0
            ap = self.ap
            if mask is not None:
                has_rel, ap = has_rel[mask], ap[mask]
            return float(ap[has_rel].mean()) if has_rel.any() else 0.0
        raise ValueError(f"unknown metric {name!r}")

    def map_skipped(self, mask=None) -> int:
        has_rel = self.rel_count > 0
        if mask is not None:
            has_rel = has_rel[mask]
        return int((~has_rel).sum())

    @property
    def top1_correct(self) -> np.ndarray:
        return self.first_rank == 0


def evaluate(gallery: FeatureSet, query: FeatureSet, dist: str = "l2",
             exclude_same_id: bool = True, workers: int = 1) -> EvalStats:
    """Full-depth ranking plus metric scan without materializing the
    ranking beyond one query block at a time."""
    _check_sets(gallery, query, dist)
    n_g, n_q = len(gallery), len(query)
    if n_g == 0:
        raise ValueError("empty gallery")

    g = _prepared_vectors(gallery, dist, "gallery")
    q = _prepared_vectors(query, dist, "query")
    g_sq = np.einsum("ij,ij->i", g, g) if dist == "l2" else None
    excl = _exclusion_columns(gallery, query, exclude_same_id)
    g_labels = np.ascontiguousarray(gallery.labels, dtype=np.int64)

    first = np.empty(n_q, dtype=np.int32)
    ap = np.empty(n_q, dtype=np.float64)
    rel = np.empty(n_q, dtype=np.int32)

    def do_block(rg):
        s, e = rg
        d_blk = _distance_block(q[s:e], g, g_sq, dist)
        rows = np.nonzero(excl[s:e] >= 0)[0]
        d_blk[rows, excl[s:e][rows]] = np.inf
        order = np.argsort(d_blk, axis=1, kind="stable").astype(np.int32)
        valid = np.minimum(n_g, n_g - (excl[s:e] >= 0)).astype(np.int32)
        f, a, r = _scan(order, valid, g_labels, query.labels[s:e])
        first[s:e], ap[s:e], rel[s:e] = f, a, r

    _run_blt(do_block, _block_ranges(n_q, n_g, workers), workers)
    return EvalStats(
        first_rank=first, ap=ap, rel_count=rel, n_gallery=n_g, n_queries=n_q
    )
