"""Cosine ranking and retrieval metrics (mAP, NDCG, ANMRR, PR curve, open-set risk).

Relevance is binary: a target is relevant to a query when their labels match.
Every metric runs over the full ranking with no cutoff.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class RankedRetrieval:
    """Per query: target indices best-first, their similarities and relevance flags."""

    order: list
    similarity: list
    relevance: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_queries(self):
        return len(self.order)

    @classmethod
    def from_relevance(cls, relevance):
        """Build a ranking directly from best-first relevance lists."""
        rel = [np.asarray(r, dtype=bool) for r in relevance]
        order = [np.arange(len(r)) for r in rel]
        sim = [-np.arange(len(r), dtype=np.float64) for r in rel]
        return cls(order, sim, rel)


@dataclass
class MetricReport:
    map: float
    ndcg: float
    anmrr: float
    pr_curve: list
    per_query: dict = field(default_factory=dict)
    skipped_queries: int = 0

    def scalars(self):
        return {"mAP": self.map, "NDCG": self.ndcg, "ANMRR": self.anmrr}


def cosine_similarity(queries, targets):
    """Cosine similarity matrix; rows or columns with zero norm score ``-inf``."""
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if q.ndim != 2 or t.ndim != 2 or q.shape[1] != t.shape[1]:
        raise ShapeError(f"query shape {q.shape} and target shape {t.shape} are incompatible")
    qn = np.linalg.norm(q, axis=1)
    tn = np.linalg.norm(t, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = (q / np.where(qn > 0, qn, 1.0)[:, None]) @ (t / np.where(tn > 0, tn, 1.0)[:, None]).T
    sim[qn == 0, :] = -np.inf
    sim[:, tn == 0] = -np.inf
    return sim


def rank(queries, targets, query_labels=None, target_labels=None,
         query_ids=None, target_ids=None, exclude_same_id=False):
    """Rank all targets for every query by descending cosine similarity.

    Ties go to the lower target index.  With ``exclude_same_id`` a target whose
    id equals the query's id is dropped from that query's ranking.
    """
    sim = cosine_similarity(queries, targets)
    n_q, n_t = sim.shape
    diagnostics = {
        "zero_norm_queries": int(np.sum(np.linalg.norm(queries, axis=1) == 0)),
        "zero_norm_targets": int(np.sum(np.linalg.norm(targets, axis=1) == 0)),
    }
    if diagnostics["zero_norm_queries"] or diagnostics["zero_norm_targets"]:
        log.warning("zero-norm embeddings ranked last: %s", diagnostics)
    have_labels = query_labels is not None and target_labels is not None
    if have_labels:
        query_labels = np.asarray(query_labels)
        target_labels = np.asarray(target_labels)
    orders, sims, rels = [], [], []
    for i in range(n_q):
        keep = np.arange(n_t)
        if exclude_same_id and query_ids is not None and target_ids is not None:
            keep = keep[np.asarray(target_ids) != query_ids[i]]
        idx = keep[np.lexsort((keep, -sim[i, keep]))]
        orders.append(idx)
        sims.append(sim[i, idx])
        if have_labels:
            rels.append(target_labels[idx] == query_labels[i])
        else:
            rels.append(np.zeros(len(idx), dtype=bool))
    return RankedRetrieval(orders, sims, rels, diagnostics)


# ---------------------------------------------------------------------------
# Per-query metrics


def average_precision(relevance):
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return np.nan
    ranks = hits + 1
    return float(np.mean(np.arange(1, hits.size + 1) / ranks))


def ndcg_single(relevance):
    rel = np.asarray(relevance, dtype=np.float64)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return np.nan
    discounts = 1.0 / np.log2(np.arange(2, rel.size + 2))
    return float((rel * discounts).sum() / discounts[:n_rel].sum())


def nmrr_single(relevance, k_limit):
    """MPEG-7 normalized modified retrieval rank for one query."""
    ranks = np.flatnonzero(np.asarray(relevance, dtype=bool)) + 1.0
    ng = ranks.size
    if ng == 0:
        return np.nan
    ranks = np.where(ranks <= k_limit, ranks, 1.25 * k_limit)
    mrr = ranks.mean() - 0.5 - ng / 2.0
    return float(mrr / (1.25 * k_limit - 0.5 - ng / 2.0))


def precision_recall_points(relevance, n_points=11):
    """Interpolated precision at ``n_points`` evenly spaced recall levels."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = rel.sum()
    levels = np.linspace(0.0, 1.0, n_points)
    if n_rel == 0:
        return levels, np.full(n_points, np.nan)
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, rel.size + 1)
    recall = hits / n_rel
    # best precision at or beyond each rank
    tail_max = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.empty(n_points)
    for j, level in enumerate(levels):
        first = np.searchsorted(recall, level - 1e-12, side="left")
        out[j] = tail_max[first] if first < rel.size else 0.0
    return levels, out


# ---------------------------------------------------------------------------
# Aggregates


def _valid_queries(rr):
    valid = [i for i, r in enumerate(rr.relevance) if np.any(r)]
    if not valid:
        raise EvaluationError("no query has a relevant target")
    return valid


def mean_average_precision(rr):
    valid = _valid_queries(rr)
    return float(np.mean([average_precision(rr.relevance[i]) for i in valid]))


def ndcg(rr):
    valid = _valid_queries(rr)
    return float(np.mean([ndcg_single(rr.relevance[i]) for i in valid]))


def anmrr(rr):
    valid = _valid_queries(rr)
    counts = {i: int(np.sum(rr.relevance[i])) for i in valid}
    gtm = max(counts.values())
    values = [nmrr_single(rr.relevance[i], min(4 * counts[i], 2 * gtm)) for i in valid]
    return float(np.mean(values))


def pr_curve(rr, n_points=11):
    valid = _valid_queries(rr)
    if n_points < 2:
        raise EvaluationError("a PR curve needs at least two recall levels")
    curves = [precision_recall_points(rr.relevance[i], n_points)[1] for i in valid]
    levels = np.linspace(0.0, 1.0, n_points)
    return list(zip(levels.tolist(), np.mean(curves, axis=0).tolist()))


def evaluate(rr, n_points=11):
    valid = _valid_queries(rr)
    skipped = rr.n_queries - len(valid)
    if skipped:
        log.info("%d queries without relevant targets skipped", skipped)
    per_query = {
        "ap": [average_precision(r) for r in rr.relevance],
        "ndcg": [ndcg_single(r) for r in rr.relevance],
    }
    return MetricReport(
        map=mean_average_precision(rr),
        ndcg=ndcg(rr),
        anmrr=anmrr(rr),
        pr_curve=pr_curve(rr, n_points),
        per_query=per_query,
        skipped_queries=skipped,
    )


def empirical_risk(query_embeddings, query_labels, target_embeddings, target_labels):
    """Mean over all query/target pairs of the open-set risk integrand.

    Distance is squared Euclidean between L2-normalized embeddings; mismatched
    pairs are charged ``exp(-D)`` and matched pairs ``1 - exp(-D)``.
    """
    q = np.asarray(query_embeddings, dtype=np.float64)
    t = np.asarray(target_embeddings, dtype=np.float64)
    if q.size == 0 or t.size == 0:
        raise EvaluationError("empirical risk needs non-empty query and target sets")
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), np.finfo(float).tiny)
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), np.finfo(float).tiny)
    diff = q[:, None, :] - t[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    same = np.asarray(query_labels)[:, None] == np.asarray(target_labels)[None, :]
    similarity = np.exp(-dist)
    return float(np.mean(np.where(same, 1.0 - similarity, similarity)))
