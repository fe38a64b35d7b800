"""Open-set ranking and retrieval metrics (mAP, NDCG, ANMRR)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dac_retrieval.errors import DataError, ShapeError
from dac_retrieval.fusion import Descriptor

log = logging.getLogger(__name__)


class ExcludedQuery(DataError):
    """The query has no relevant item in the gallery and cannot be scored."""


@dataclass
class ObjectRecord:
    id: str
    label: str
    split: str
    views: np.ndarray
    description: np.ndarray | None = None


@dataclass
class OpenSetDataset:
    train: list[ObjectRecord]
    query: list[ObjectRecord]
    target: list[ObjectRecord]
    # label -> description feature vector, for training classes
    class_descriptions: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "dataset"

    @property
    def seen_labels(self) -> list[str]:
        return sorted({o.label for o in self.train})

    @property
    def unseen_labels(self) -> list[str]:
        return sorted({o.label for o in self.query} | {o.label for o in self.target})


@dataclass
class SplitReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            raise DataError("open-set split violated:\n  " + "\n  ".join(self.violations))


def validate_open_set_split(ds: OpenSetDataset) -> SplitReport:
    """Check label disjointness, query coverage and nonempty splits."""
    problems = []
    for name in ("train", "query", "target"):
        if not getattr(ds, name):
            problems.append(f"{name} split is empty")
    seen = set(ds.seen_labels)
    unseen = set(ds.unseen_labels)
    overlap = sorted(seen & unseen)
    if overlap:
        problems.append(f"labels shared between training and retrieval splits: {overlap}")
    leaked = sorted(set(ds.class_descriptions) & unseen)
    if leaked:
        problems.append(f"class descriptions supplied for unseen labels: {leaked}")
    missing = sorted(seen - set(ds.class_descriptions))
    if missing:
        problems.append(f"training labels without a class description: {missing}")
    target_labels = {o.label for o in ds.target}
    uncovered = sorted({o.label for o in ds.query} - target_labels)
    if ds.target and uncovered:
        problems.append(f"query labels absent from target split: {uncovered}")
    ids = [o.id for o in ds.train + ds.query + ds.target]
    if len(ids) != len(set(ids)):
        problems.append("object ids are not unique")
    return SplitReport(problems)


@dataclass
class RankedList:
    query_id: str
    ids: list[str]
    scores: np.ndarray
    relevance: np.ndarray


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.where(norms > 0, norms, 1.0)


def _order(scores: np.ndarray, ids: list[str]) -> np.ndarray:
    # ascending id rank breaks ties between equal scores
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return np.lexsort((id_rank, -scores))


def rank(q: Descriptor, gallery: list[Descriptor]) -> RankedList:
    """Sort the gallery by cosine similarity to ``q`` (descending).

    A gallery item sharing the query's id is left out of its ranking.
    """
    items = [d for d in gallery if d.id != q.id or not q.id]
    if not items:
        raise DataError("gallery is empty")
    mat = np.stack([np.asarray(d.h, dtype=np.float64) for d in items])
    qh = np.asarray(q.h, dtype=np.float64)
    if mat.shape[1] != qh.shape[0]:
        raise ShapeError(f"descriptor dim {qh.shape[0]} != gallery dim {mat.shape[1]}")
    scores = _unit_rows(mat) @ (qh / np.linalg.norm(qh))
    ids = [d.id for d in items]
    order = _order(scores, ids)
    rel = np.array([items[i].label == q.label for i in order], dtype=bool)
    return RankedList(q.id, [ids[i] for i in order], scores[order], rel)


# --- metrics on ordered binary relevance -----------------------------------


def average_precision(rel) -> float:
    rel = np.asarray(rel, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ExcludedQuery("no relevant item")
    hits = np.cumsum(rel)
    positions = np.flatnonzero(rel) + 1
    return float(np.sum(hits[rel] / positions) / n_rel)


def ndcg(rel, cutoff: int | None = None) -> float:
    """Binary-gain NDCG with a log2(rank + 1) discount."""
    rel = np.asarray(rel, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ExcludedQuery("no relevant item")
    k = len(rel) if cutoff is None else min(cutoff, len(rel))
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.sum(discounts[rel[:k]]))
    idcg = float(np.sum(discounts[: min(n_rel, k)]))
    return dcg / idcg


def nmrr(relevant_ranks, ng: int, gtm: int) -> float:
    """MPEG-7 normalized modified retrieval rank of one query.

    ``relevant_ranks`` are the 1-based positions of the query's relevant
    items; ``ng`` is its ground-truth size and ``gtm`` the largest ``ng``
    over all queries. Items missing from ``relevant_ranks`` or ranked past
    ``K = min(4 * ng, 2 * gtm)`` count at the penalty rank ``1.25 * K``.
    """
    if ng < 1:
        raise ExcludedQuery("ground-truth size must be >= 1")
    k = min(4 * ng, 2 * gtm)
    penalty = 1.25 * k
    ranks = [r if r <= k else penalty for r in relevant_ranks]
    ranks += [penalty] * (ng - len(ranks))
    avr = math.fsum(ranks) / ng
    mrr = avr - 0.5 - 0.5 * ng
    return mrr / (penalty - 0.5 - 0.5 * ng)


def anmrr(ranks_per_query, ng_per_query) -> float:
    if len(ranks_per_query) != len(ng_per_query) or not ng_per_query:
        raise DataError("need one ground-truth size per query")
    gtm = max(ng_per_query)
    return float(np.mean([nmrr(r, ng, gtm) for r, ng in zip(ranks_per_query, ng_per_query)]))


@dataclass
class MetricsReport:
    map: float
    ndcg: float
    anmrr: float
    per_query: list[dict]
    n_queries: int
    n_gallery: int
    excluded: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "mAP": self.map,
            "NDCG": self.ndcg,
            "ANMRR": self.anmrr,
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "excluded": list(self.excluded),
            "per_query": self.per_query,
        }

    def row(self) -> str:
        return f"{self.map:.2f}/{self.ndcg:.2f}/{self.anmrr:.2f}"


def evaluate(query: list[Descriptor], target: list[Descriptor], ndcg_cutoff: int | None = None) -> MetricsReport:
    """Score every query against the target gallery.

    Queries without a relevant gallery item are excluded and logged.
    Aggregates are percentages rounded to two decimals; the per-query
    values stay unrounded fractions.
    """
    if not target:
        raise DataError("target gallery is empty")
    eligible = []
    excluded = []
    for q in query:
        ranked = rank(q, target)
        if not ranked.relevance.any():
            log.warning("query %s (label %s) has no relevant target; excluded", q.id, q.label)
            excluded.append(q.id)
            continue
        eligible.append(ranked)
    if not eligible:
        raise DataError("no eligible queries")

    ranks = [list(np.flatnonzero(r.relevance) + 1) for r in eligible]
    ngs = [len(r) for r in ranks]
    gtm = max(ngs)
    per_query = []
    for r, rr, ng in zip(eligible, ranks, ngs):
        per_query.append({
            "query": r.query_id,
            "AP": average_precision(r.relevance),
            "NDCG": ndcg(r.relevance, ndcg_cutoff),
            "NMRR": nmrr(rr, ng, gtm),
        })

    def pct(key):
        return round(100.0 * math.fsum(p[key] for p in per_query) / len(per_query), 2)

    return MetricsReport(
        map=pct("AP"), ndcg=pct("NDCG"), anmrr=pct("NMRR"),
        per_query=per_query, n_queries=len(eligible), n_gallery=len(target), excluded=excluded,
    )
