import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fofa.data import SplitDataset
from fofa.metrics import (MetricSums, ablation_gate, block_count_distribution, block_usage, evaluate,
                          rank_metrics, rank_of_target, ranks_full)
from oracles import small_model


def test_rank_metrics_known_values():
    ndcg, hit = rank_metrics([1, 2, 11])
    assert ndcg == pytest.approx((1 + 1 / math.log2(3)) / 3)
    assert hit == pytest.approx(2 / 3)
    assert rank_metrics([]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        rank_metrics([0])


def test_ties_rank_lower_ids_first():
    scores = np.array([0.5, 0.9, 0.5, 0.5])
    assert rank_of_target(scores, 0) == 2
    assert rank_of_target(scores, 2) == 3
    assert rank_of_target(scores, 3) == 4
    np.testing.assert_array_equal(ranks_full(scores[None].repeat(3, 0), np.array([0, 2, 1])), [2, 3, 1])
    assert rank_of_target(scores[[3, 0]], 3, np.array([3, 0])) == 2
    with pytest.raises(ValueError):
        rank_of_target(scores, 7)


@given(st.lists(st.integers(0, 5), min_size=2, max_size=12), st.data())
def test_vectorized_ranks_match_scalar(scores, data):
    scores = np.array(scores, dtype=float)
    target = data.draw(st.integers(0, len(scores) - 1))
    assert ranks_full(scores[None], np.array([target]))[0] == rank_of_target(scores, target)


@given(st.lists(st.integers(1, 40), max_size=30), st.integers(0, 30))
def test_metric_sums_merge_exactly(ranks, cut):
    a = MetricSums().add(ranks[:cut])
    b = MetricSums().add(ranks[cut:])
    whole = MetricSums().add(ranks)
    assert a.merge(b).result() == pytest.approx(whole.result())
    if ranks:
        assert whole.result() == pytest.approx(rank_metrics(ranks))


def test_ablation_gates_keep_the_learned_count(gen):
    learned = np.zeros((3, 5, 2), np.float32)
    bits = np.array([[1, 0, 1, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0]], bool)
    learned[..., 0], learned[..., 1] = bits, ~bits
    first = ablation_gate("first-k", learned)[..., 0]
    last = ablation_gate("last-k", learned)[..., 0]
    rand = ablation_gate("random-block", learned, gen)[..., 0]
    np.testing.assert_array_equal(first[0], [1, 1, 0, 0, 0])
    np.testing.assert_array_equal(last[0], [0, 0, 0, 1, 1])
    for g in (first, last, rand):
        np.testing.assert_array_equal(g.sum(1), bits.sum(1))
    np.testing.assert_array_equal(ablation_gate("all-execute", learned)[..., 0], np.ones((3, 5)))
    with pytest.raises(ValueError):
        ablation_gate("middle-k", learned)


def test_usage_histograms():
    kept = np.array([[1, 0, 1], [1, 1, 1], [0, 0, 0]], bool)
    np.testing.assert_array_equal(block_usage(kept), [2, 1, 2])
    np.testing.assert_array_equal(block_count_distribution(kept), [1, 0, 1, 1])


def _toy_data(gen, n_users=12, n_items=30):
    train = [gen.integers(0, n_items, size=gen.integers(3, 15)) for _ in range(n_users)]
    return SplitDataset(train, gen.integers(0, n_items, size=n_users), n_items, np.arange(n_users),
                        np.arange(n_items))


def test_first_k_with_all_blocks_equals_all_execute(gen):
    model = small_model("forward-ofa", execute_bias=20.0)  # every block kept
    data = _toy_data(gen)
    learned = evaluate(model, data)
    assert learned.mean_blocks == 3
    for policy in ("first-k", "all-execute", "last-k", "random-block"):
        res = evaluate(model, data, policy)
        np.testing.assert_array_equal(res.ranks, learned.ranks)


def test_random_block_rows_are_reproducible(gen):
    model = small_model("forward-ofa", seed=2)
    data = _toy_data(gen)
    a = evaluate(model, data, "random-block", seed=5)
    b = evaluate(model, data, "random-block", seed=5)
    np.testing.assert_array_equal(a.ranks, b.ranks)
    assert a.row() == b.row()


def test_evaluate_matches_a_direct_scoring_loop(gen):
    model = small_model("device-rec")
    data = _toy_data(gen)
    res = evaluate(model, data, batch_size=5)
    for u in range(data.n_users):
        rep = model.forward(data.train[u][None, -12:], None).rep.data[0, -1]
        assert res.ranks[u] == rank_of_target(model.shared.item_emb.data @ rep, int(data.test[u]))
    assert res.mean_blocks == 3 and res.users == data.n_users


def test_sampled_ranking_bounds(gen):
    model = small_model("forward-ofa")
    data = _toy_data(gen)
    res = evaluate(model, data, sampled_negatives=9)
    assert res.ranks.max() <= 10
    full = evaluate(model, data)
    assert np.all(res.ranks <= full.ranks)


def test_ablations_need_a_controller(gen):
    with pytest.raises(ValueError):
        evaluate(small_model("device-rec"), _toy_data(gen), "first-k")


def _brute_force(scores, targets, k=10):
    ndcg = hit = 0.0
    for row, t in zip(scores, targets):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        rank = order.index(t) + 1
        if rank <= k:
            hit += 1
            ndcg += 1 / math.log2(rank + 1)
    return ndcg / len(targets), hit / len(targets)


def test_metrics_match_a_brute_force_script(gen):
    scores = np.round(gen.normal(size=(100, 40)), 1)  # rounding creates ties
    targets = gen.integers(0, 40, size=100)
    assert rank_metrics(ranks_full(scores, targets)) == pytest.approx(_brute_force(scores, targets))


def test_metrics_ignore_monotone_transforms(gen):
    scores = gen.normal(size=(50, 30))
    targets = gen.integers(0, 30, size=50)
    base = ranks_full(scores, targets)
    np.testing.assert_array_equal(ranks_full(np.exp(3 * scores) + 1, targets), base)
    np.testing.assert_array_equal(ranks_full(np.arctan(scores), targets), base)
    assert rank_metrics([3]) == (0.5, 1.0)
