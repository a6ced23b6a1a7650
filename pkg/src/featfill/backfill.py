"""Backfilling policies, partial galleries, trajectory curves, and analysis.

A plan is an ordering over gallery ids plus an alpha grid; the curve
evaluates retrieval metrics on every partially backfilled gallery along
the grid, tracks positive/negative flips against the zero-backfill
baseline, and (when subgroup tags are present) per-subgroup values, the
majority-minority gap, and how fast each subgroup gets backfilled.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignNet, ClassifierHead, per_item_loss, predict_sigma
from .core import FeatureSet, PairedFeatureSet
from .losses import LossConfig
from .retrieval import EvalStats, evaluate
from .tensornet import forward

POLICY_KINDS = (
    "random",
    "sigma_desc",
    "cheat_loss_desc",
    "entropy_desc",
    "margin_conf_asc",
    "least_conf_asc",
    "file",
)


@dataclass(frozen=True)
class OrderingPolicy:
    """How to order gallery items for backfilling.

    ``random`` needs a seed; ``file`` reads one id per line; the score
    policies need the trained nets named in :func:`make_ordering`.
    """

    kind: str
    seed: int | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}")
        if self.kind == "random" and self.seed is None:
            raise ValueError("random policy requires a seed")
        if self.kind == "file" and not self.path:
            raise ValueError("file policy requires a path")

    @property
    def name(self) -> str:
        return self.kind

    @classmethod
    def parse(cls, text: str, default_seed: int = 0) -> "OrderingPolicy":
        if text.startswith("file:"):
            return cls(kind="file", path=text[5:])
        if text == "random":
            return cls(kind="random", seed=default_seed)
        return cls(kind=text)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _order_ids(ids: np.ndarray, scores: np.ndarray, descending: bool) -> np.ndarray:
    if not np.all(np.isfinite(scores)):
        raise ValueError("ordering scores must be finite")
    key = -scores if descending else scores
    return ids[np.lexsort((ids, key))]


def make_ordering(policy: OrderingPolicy, gallery_old: FeatureSet,
                  net: AlignNet | None = None,
                  head: ClassifierHead | None = None,
                  pairs_for_cheat: PairedFeatureSet | None = None,
                  loss_cfg: LossConfig | None = None) -> np.ndarray:
    """Permutation of gallery ids under the given policy.

    Ties break by ascending id. The cheating policy scores items by their
    true per-item training loss, which needs the paired new features; the
    confidence policies score the frozen head's softmax on the transformed
    old features.
    """
    ids = gallery_old.ids
    if policy.kind == "random":
        rng = np.random.default_rng(policy.seed)
        return rng.permutation(np.sort(ids))
    if policy.kind == "file":
        loaded = np.loadtxt(policy.path, dtype=np.int64, ndmin=1)
        if sorted(loaded.tolist()) != sorted(ids.tolist()):
            raise ValueError(f"{policy.path} is not a permutation of gallery ids")
        return loaded

    if policy.kind == "sigma_desc":
        if net is None:
            raise ValueError("sigma_desc requires the trained alignment net")
        return _order_ids(ids, predict_sigma(net, gallery_old), descending=True)

    if policy.kind == "cheat_loss_desc":
        if net is None or head is None or pairs_for_cheat is None:
            raise ValueError(
                "cheat_loss_desc requires net, head, and the paired gallery"
            )
        if not np.array_equal(pairs_for_cheat.old.ids, ids):
            raise ValueError("pairs_for_cheat must cover the gallery ids")
        losses = per_item_loss(
            net, head, pairs_for_cheat, loss_cfg or LossConfig()
        )
        return _order_ids(ids, losses, descending=True)

    if net is None or head is None:
        raise ValueError(f"{policy.kind} requires net and head")
    h_out, _ = forward(net.backbone, gallery_old.vectors.astype(np.float64))
    probs = _softmax(head.logits(h_out))
    if policy.kind == "entropy_desc":
        entropy = -(probs * np.log(probs)).sum(axis=1)
        return _order_ids(ids, entropy, descending=True)
    top2 = np.sort(probs, axis=1)[:, -2:]
    if policy.kind == "margin_conf_asc":
        return _order_ids(ids, top2[:, 1] - top2[:, 0], descending=False)
    return _order_ids(ids, top2[:, 1], descending=False)  # least_conf_asc


def make_alpha_grid(points: int = 21) -> np.ndarray:
    if points < 2:
        raise ValueError("alpha grid needs at least the endpoints")
    return np.arange(points) / (points - 1)


@dataclass(frozen=True)
class BackfillPlan:
    """Ordering pi over gallery ids plus the alpha grid."""

    ordering: np.ndarray
    alpha_grid: np.ndarray

    def __post_init__(self):
        ordering = np.ascontiguousarray(self.ordering, dtype=np.int64)
        grid = np.ascontiguousarray(self.alpha_grid, dtype=np.float64)
        if len(np.unique(ordering)) != len(ordering):
            raise ValueError("ordering must be a permutation (duplicate ids)")
        if grid.ndim != 1 or len(grid) < 2:
            raise ValueError("alpha_grid must hold at least the endpoints")
        if np.any(np.diff(grid) < 0) or grid[0] != 0.0 or grid[-1] != 1.0:
            raise ValueError("alpha_grid must be sorted and span [0, 1]")
        object.__setattr__(self, "ordering", ordering)
        object.__setattr__(self, "alpha_grid", grid)


def n_backfilled(alpha: float, n: int) -> int:
    """floor(alpha * n) items carry new features at fraction alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return math.floor(alpha * n)


def partial_gallery(plan: BackfillPlan, alpha: float,
                    transformed_old: FeatureSet, new: FeatureSet) -> FeatureSet:
    """Gallery with new vectors for the first floor(alpha*n) ids of the
    ordering and transformed old vectors for the rest."""
    if not np.array_equal(transformed_old.ids, new.ids):
        raise ValueError("transformed_old and new must be aligned by id")
    if not np.array_equal(transformed_old.labels, new.labels):
        raise ValueError("transformed_old and new must share labels")
    n = len(new)
    if sorted(plan.ordering.tolist()) != sorted(new.ids.tolist()):
        raise ValueError("plan ordering is not a permutation of gallery ids")
    n_a = n_backfilled(alpha, n)
    vectors = transformed_old.vectors.copy()
    if n_a:
        lookup = new.id_to_row()
        rows = np.fromiter(
            (lookup[int(i)] for i in plan.ordering[:n_a]), dtype=np.int64
        )
        vectors[rows] = new.vectors[rows]
    return new.with_vectors(vectors, role="gallery")


def count_flips(baseline_correct, current_correct) -> tuple[int, int]:
    """(positive, negative) flips of ``current`` against ``baseline``."""
    base = np.asarray(baseline_correct, dtype=bool)
    cur = np.asarray(current_correct, dtype=bool)
    if base.shape != cur.shape:
        raise ValueError("flip inputs must cover the same queries")
    return int((~base & cur).sum()), int((base & ~cur).sum())


def _merge_count(seq: list[int]) -> tuple[list[int], int]:
    n = len(seq)
    if n <= 1:
        return seq, 0
    mid = n // 2
    left, a = _merge_count(seq[:mid])
    right, b = _merge_count(seq[mid:])
    merged = []
    inv = a + b
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            merged.append(right[j])
            j += 1
            inv += len(left) - i
    merged.extend(left[i:])
    merged.extend(right[j:])
    return merged, inv


def kendall_tau(order_a, order_b) -> float:
    """Rank correlation of two total orders over the same ids.

    tau = (concordant - discordant) / C(n, 2), computed from a merge-sort
    inversion count in O(n log n).
    """
    a = np.ascontiguousarray(order_a, dtype=np.int64)
    b = np.ascontiguousarray(order_b, dtype=np.int64)
    n = len(a)
    if n < 2:
        raise ValueError("kendall_tau needs at least two items")
    if len(b) != n or len(np.unique(a)) != n:
        raise ValueError("orders must be permutations of the same ids")
    pos_b = {int(v): i for i, v in enumerate(b)}
    try:
        seq = [pos_b[int(v)] for v in a]
    except KeyError as exc:
        raise ValueError(f"id {exc} missing from second order") from exc
    _, inversions = _merge_count(seq)
    pairs = n * (n - 1) // 2
    return 1.0 - 2.0 * inversions / pairs


@dataclass
class BackfillReport:
    """Curve values, areas, flip counts, and subgroup breakdowns."""

    alphas: np.ndarray
    metrics: list[str]
    values: dict[str, np.ndarray]
    m_tilde: dict[str, float]
    pos_flips: np.ndarray  # vs alpha=0, per grid point
    neg_flips: np.ndarray
    n_queries: int
    n_gallery: int
    map_skipped: int
    subgroup_values: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    subgroup_gaps: dict[str, np.ndarray] = field(default_factory=dict)
    majority_tag: int | None = None
    minority_tag: int | None = None
    backfilled_fraction: dict[int, np.ndarray] = field(default_factory=dict)
    kendall: dict[str, float] = field(default_factory=dict)


def backfill_curve(plan: BackfillPlan, transformed_old: FeatureSet,
                   new_gallery: FeatureSet, new_query: FeatureSet,
                   metrics=("cmc_top1", "cmc_top5", "map"), dist: str = "l2",
                   exclude_same_id: bool = True, workers: int = 1) -> BackfillReport:
    """Evaluate every grid point; queries always carry new-model features."""
    metrics = list(metrics)
    alphas = plan.alpha_grid
    per_alpha: list[EvalStats] = [
        evaluate(
            partial_gallery(plan, float(a), transformed_old, new_gallery),
            new_query,
            dist=dist,
            exclude_same_id=exclude_same_id,
            workers=workers,
        )
        for a in alphas
    ]

    values = {
        m: np.array([st.metric_value(m) for st in per_alpha]) for m in metrics
    }
    m_tilde = {m: float(values[m].mean()) for m in metrics}

    base_correct = per_alpha[0].top1_correct
    flips = [count_flips(base_correct, st.top1_correct) for st in per_alpha]
    pos = np.array([p for p, _ in flips], dtype=np.int64)
    neg = np.array([q for _, q in flips], dtype=np.int64)

    report = BackfillReport(
        alphas=alphas,
        metrics=metrics,
        values=values,
        m_tilde=m_tilde,
        pos_flips=pos,
        neg_flips=neg,
        n_queries=len(new_query),
        n_gallery=len(new_gallery),
        map_skipped=per_alpha[0].map_skipped(),
    )

    if new_query.subgroups is not None:
        tags = np.unique(new_query.subgroups)
        for m in metrics:
            report.subgroup_values[m] = {
                int(t): np.array(
                    [
                        st.metric_value(m, mask=new_query.subgroups == t)
                        for st in per_alpha
                    ]
                )
                for t in tags
            }
        if len(tags) == 2:
            counts = [(new_query.subgroups == t).sum() for t in tags]
            minority, majority = (
                (int(tags[0]), int(tags[1]))
                if counts[0] <= counts[1]
                else (int(tags[1]), int(tags[0]))
            )
            report.majority_tag, report.minority_tag = majority, minority
            for m in metrics:
                report.subgroup_gaps[m] = (
                    report.subgroup_values[m][majority]
                    - report.subgroup_values[m][minority]
                )

    if new_gallery.subgroups is not None:
        tag_of_id = dict(
            zip(new_gallery.ids.tolist(), new_gallery.subgroups.tolist())
        )
        order_tags = np.array(
            [tag_of_id[int(i)] for i in plan.ordering], dtype=np.int64
        )
        for t in np.unique(new_gallery.subgroups):
            total = int((new_gallery.subgroups == t).sum())
            cum = np.cumsum(order_tags == t)
            fractions = []
            for a in alphas:
                n_a = n_backfilled(float(a), len(new_gallery))
                fractions.append((cum[n_a - 1] if n_a else 0) / total)
            report.backfilled_fraction[int(t)] = np.array(fractions)

    return report


def subgroup_gap_curve(plan: BackfillPlan, transformed_old: FeatureSet,
                       new_gallery: FeatureSet, new_query: FeatureSet,
                       metric: str = "cmc_top1", dist: str = "l2",
                       workers: int = 1):
    """Per-subgroup curve, majority-minority gap, and backfilled fractions.

    Requires subgroup tags on the query records.
    """
    if new_query.subgroups is None:
        raise ValueError("subgroup_gap_curve requires subgroup tags on queries")
    report = backfill_curve(
        plan, transformed_old, new_gallery, new_query,
        metrics=[metric], dist=dist, workers=workers,
    )
    gap = report.subgroup_gaps.get(metric)
    return report.subgroup_values[metric], gap, report.backfilled_fraction


CSV_COLUMNS = ("alpha", "metric", "value", "subgroup", "pos_flips", "neg_flips")


def report_rows(report: BackfillReport) -> list[dict]:
    """Flatten a report into CSV rows (one per alpha/metric/subgroup)."""
    rows = []
    for i, alpha in enumerate(report.alphas):
        for m in report.metrics:
            rows.append(
                {
                    "alpha": float(alpha),
                    "metric": m,
                    "value": float(report.values[m][i]),
                    "subgroup": "",
                    "pos_flips": int(report.pos_flips[i]),
                    "neg_flips": int(report.neg_flips[i]),
                }
            )
        for m, per_tag in report.subgroup_values.items():
            for tag, series in per_tag.items():
                rows.append(
                    {
                        "alpha": float(alpha),
                        "metric": m,
                        "value": float(series[i]),
                        "subgroup": int(tag),
                        "pos_flips": "",
                        "neg_flips": "",
                    }
                )
        for tag, series in report.backfilled_fraction.items():
            rows.append(
                {
                    "alpha": float(alpha),
                    "metric": "backfilled_fraction",
                    "value": float(series[i]),
                    "subgroup": int(tag),
                    "pos_flips": "",
                    "neg_flips": "",
                }
            )
    return rows


def write_report_csv(report: BackfillReport, path, config_hash: str = "",
                     seed: int | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash} seed={seed}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report_rows(report):
            row = dict(row)
            row["alpha"] = repr(row["alpha"])
            row["value"] = repr(row["value"])
            writer.writerow(row)
    tmp.replace(path)


def report_summary(report: BackfillReport, policy: str, config_hash: str = "",
                   seed: int | None = None) -> dict:
    summary = {
        "config_hash": config_hash,
        "seed": seed,
        "policy": policy,
        "n_gallery": report.n_gallery,
        "n_queries": report.n_queries,
        "alphas": [float(a) for a in report.alphas],
        "m_tilde": {m: report.m_tilde[m] for m in report.metrics},
        "map_skipped": report.map_skipped,
        "pos_flips": report.pos_flips.tolist(),
        "neg_flips": report.neg_flips.tolist(),
    }
    if report.subgroup_gaps:
        summary["subgroup_gap"] = {
            m: g.tolist() for m, g in report.subgroup_gaps.items()
        }
        summary["majority_tag"] = report.majority_tag
        summary["minority_tag"] = report.minority_tag
    if report.backfilled_fraction:
        summary["backfilled_fraction"] = {
            str(t): s.tolist() for t, s in report.backfilled_fraction.items()
        }
    if report.kendall:
        summary["kendall"] = dict(report.kendall)
    return summary


def write_report_json(summary: dict, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
