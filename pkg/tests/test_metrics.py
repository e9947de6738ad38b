import math

import numpy as np
import pytest

from srcr import metrics
from srcr.errors import EvaluationError
from srcr.metrics import RankedRetrieval

from oracles import (
    anmrr_oracle,
    ap_oracle,
    cosine_rank_oracle,
    ndcg_oracle,
    pr_oracle,
    risk_oracle,
)


def random_instance(rng):
    n_q, n_t = int(rng.integers(1, 11)), int(rng.integers(1, 21))
    n_cls = int(rng.integers(1, 5))
    q = rng.normal(size=(n_q, 3))
    t = rng.normal(size=(n_t, 3))
    return q, rng.integers(0, n_cls, n_q), t, rng.integers(0, n_cls, n_t)


def compare_all(rr, rels):
    valid = [r for r in rels if any(r)]
    if not valid:
        with pytest.raises(EvaluationError):
            metrics.evaluate(rr)
        return
    rep = metrics.evaluate(rr, 11)
    assert rep.map == pytest.approx(np.mean([ap_oracle(r) for r in valid]), abs=1e-12)
    assert rep.ndcg == pytest.approx(np.mean([ndcg_oracle(r) for r in valid]), abs=1e-12)
    assert rep.anmrr == pytest.approx(anmrr_oracle(rels), abs=1e-12)
    levels, curve = pr_oracle(rels, 11)
    np.testing.assert_allclose([p for _, p in rep.pr_curve], curve, rtol=0, atol=1e-12)
    np.testing.assert_allclose([r for r, _ in rep.pr_curve], levels, rtol=0, atol=1e-15)
    assert rep.skipped_queries == len(rels) - len(valid)


def test_metrics_match_oracles_on_200_random_instances():
    rng = np.random.default_rng(2022)
    for _ in range(200):
        q, ql, t, tl = random_instance(rng)
        rr = metrics.rank(q, t, ql, tl)
        assert [o.tolist() for o in rr.order] == cosine_rank_oracle(q.tolist(), t.tolist())
        rels = [[bool(x) for x in r] for r in rr.relevance]
        compare_all(rr, rels)
        risk = metrics.empirical_risk(q, ql, t, tl)
        assert risk == pytest.approx(risk_oracle(q.tolist(), ql, t.tolist(), tl), abs=1e-12)


# --- ranking ------------------------------------------------------------


def test_exact_match_ranked_first():
    targets = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    rr = metrics.rank(np.array([[1.0, 0.0]]), targets)
    assert rr.order[0][0] == 1


def test_scaling_targets_keeps_ranking():
    rng = np.random.default_rng(1)
    q, t = rng.normal(size=(4, 5)), rng.normal(size=(6, 5))
    a, b = metrics.rank(q, t), metrics.rank(q, 5 * t)
    assert all(np.array_equal(x, y) for x, y in zip(a.order, b.order))


def test_ranking_is_permutation_with_non_increasing_similarity():
    rng = np.random.default_rng(2)
    rr = metrics.rank(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    for order, sim in zip(rr.order, rr.similarity):
        assert sorted(order.tolist()) == [0, 1, 2, 3]
        assert np.all(np.diff(sim) <= 0)
        # scalar re-computation of the top score
        assert sim[0] == pytest.approx(max(sim))


def test_ties_go_to_lower_index():
    t = np.array([[1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    assert metrics.rank(np.array([[1.0, 0.0]]), t).order[0].tolist() == [0, 1, 2]


def test_zero_norm_target_is_ranked_last():
    t = np.array([[0.0, 0.0], [-1.0, 0.0], [1.0, 1.0]])
    rr = metrics.rank(np.array([[1.0, 0.0]]), t)
    assert rr.order[0].tolist() == [2, 1, 0]
    assert rr.similarity[0][-1] == -math.inf
    assert rr.diagnostics["zero_norm_targets"] == 1


def test_exclude_same_id():
    x = np.eye(3)
    rr = metrics.rank(x, x, [0, 0, 1], [0, 0, 1], [0, 1, 2], [0, 1, 2], exclude_same_id=True)
    assert all(i not in rr.order[i] for i in range(3))


def test_target_storage_order_does_not_change_metrics():
    rng = np.random.default_rng(3)
    q, t = rng.normal(size=(5, 3)), rng.normal(size=(9, 3))
    ql, tl = rng.integers(0, 3, 5), rng.integers(0, 3, 9)
    perm = rng.permutation(9)
    a = metrics.evaluate(metrics.rank(q, t, ql, tl)).scalars()
    b = metrics.evaluate(metrics.rank(q, t[perm], ql, tl[perm])).scalars()
    assert a == pytest.approx(b, abs=1e-12)


# --- hand values ------------------------------------------------------------


def test_perfect_ranking():
    rr = RankedRetrieval.from_relevance([[1, 1, 0, 0], [1, 0, 0, 0]])
    rep = metrics.evaluate(rr)
    assert rep.map == 1.0 and rep.ndcg == 1.0 and rep.anmrr == 0.0
    assert all(p == 1.0 for _, p in rep.pr_curve)


def test_ap_half():
    assert metrics.mean_average_precision(RankedRetrieval.from_relevance([[0, 1]])) == 0.5


def test_ndcg_closed_form():
    value = metrics.ndcg(RankedRetrieval.from_relevance([[0, 1]]))
    assert value == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert value == pytest.approx(0.6309, abs=1e-4)


def test_anmrr_worst_case_is_one():
    # NG=1, K=min(4, 2)=2; the single relevant item at rank 5 lies beyond K
    assert metrics.anmrr(RankedRetrieval.from_relevance([[0, 0, 0, 0, 1]])) == pytest.approx(1.0)


def test_recall_grid():
    rep = metrics.evaluate(RankedRetrieval.from_relevance([[0, 1, 0, 1]]))
    assert [r for r, _ in rep.pr_curve] == pytest.approx([j / 10 for j in range(11)], abs=1e-15)
    precision = [p for _, p in rep.pr_curve]
    assert all(a >= b for a, b in zip(precision, precision[1:]))


def test_reversal_weakly_worsens_metrics():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 10))
        n_rel = int(rng.integers(1, n + 1))
        perfect = [1] * n_rel + [0] * (n - n_rel)
        good = metrics.evaluate(RankedRetrieval.from_relevance([perfect]))
        bad = metrics.evaluate(RankedRetrieval.from_relevance([perfect[::-1]]))
        assert bad.map <= good.map and bad.ndcg <= good.ndcg and bad.anmrr >= good.anmrr


def test_scalars_in_unit_interval():
    rng = np.random.default_rng(5)
    for _ in range(50):
        rels = (rng.random((4, 12)) < 0.3).tolist()
        rels[0][0] = True
        s = metrics.evaluate(RankedRetrieval.from_relevance(rels)).scalars()
        assert all(0.0 <= v <= 1.0 for v in s.values())


def test_queries_without_relevant_targets_are_skipped():
    rep = metrics.evaluate(RankedRetrieval.from_relevance([[1, 0], [0, 0]]))
    assert rep.skipped_queries == 1 and rep.map == 1.0


def test_no_relevant_anywhere_is_error():
    rr = RankedRetrieval.from_relevance([[0, 0]])
    for fn in (metrics.mean_average_precision, metrics.ndcg, metrics.anmrr, metrics.pr_curve):
        with pytest.raises(EvaluationError):
            fn(rr)


# --- empirical risk ---------------------------------------------------------


def test_risk_limit_cases():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert metrics.empirical_risk(x, [0, 0], x, [0, 0]) == 0.0
    assert metrics.empirical_risk(x, [0, 0], x, [1, 1]) == 1.0


def test_risk_three_by_three():
    rng = np.random.default_rng(6)
    q, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ql, tl = [0, 1, 2], [2, 1, 0]
    assert metrics.empirical_risk(q, ql, t, tl) == pytest.approx(
        risk_oracle(q.tolist(), ql, t.tolist(), tl), abs=1e-12)


def test_risk_empty_sets():
    with pytest.raises(EvaluationError):
        metrics.empirical_risk(np.zeros((0, 2)), [], np.ones((1, 2)), [0])
