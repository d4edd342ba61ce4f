import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rote.backbone import ModelConfig, init_parameters
from rote.datasets import Dataset, UserSequence
from rote.metrics import (
    METRICS_HEADER, batch_ranks, evaluate, metrics_from_ranks, ndcg_at_k, rank_of_target,
    recall_at_k, write_metrics,
)
from rote.selftest import oracle_rank


def test_cutoff_examples():
    assert recall_at_k(1, 5) == 1 and ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(3, 5) == 0.5
    assert recall_at_k(11, 10) == 0 and ndcg_at_k(11, 10) == 0.0


def test_two_users_rank_1_and_11():
    m = metrics_from_ranks(np.array([1, 11]), (10,))
    assert m.recall_at[10] == 0.5 and m.ndcg_at[10] == 0.5


def test_ties_go_to_smaller_index_and_padding_ignored():
    scores = [99.0, 1.0, 2.0, 2.0, 2.0]
    assert rank_of_target(scores, 2) == 1
    assert rank_of_target(scores, 4) == 3
    assert rank_of_target(scores, 1) == 4
    with pytest.raises(ValueError):
        rank_of_target(scores, 0)


scores_strategy = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, n, elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])),
        st.integers(1, n - 1),
    )
)


@settings(max_examples=300, deadline=None)
@given(scores_strategy)
def test_rank_matches_sort_oracle(case):
    scores, target = case
    expected = oracle_rank(scores, target)
    assert rank_of_target(scores, target) == expected
    assert batch_ranks(scores[None], np.array([target]))[0] == expected


@settings(max_examples=200, deadline=None)
@given(scores_strategy)
def test_rank_invariant_under_increasing_maps(case):
    scores, target = case
    r = rank_of_target(scores, target)
    assert rank_of_target(np.exp(scores), target) == r
    assert rank_of_target(3.0 * scores + 7.0, target) == r
    assert rank_of_target(np.arctan(scores), target) == r


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=30))
def test_monotone_in_k_and_ndcg_below_recall(ranks):
    m = metrics_from_ranks(np.array(ranks), (1, 5, 10, 20))
    ks = sorted(m.recall_at)
    for a, b in zip(ks, ks[1:]):
        assert m.recall_at[a] <= m.recall_at[b] and m.ndcg_at[a] <= m.ndcg_at[b]
    for k in ks:
        assert m.ndcg_at[k] <= m.recall_at[k] + 1e-15


def test_exclusions():
    scores = np.array([0.0, 5.0, 4.0, 3.0])
    assert rank_of_target(scores, 3, exclusions=[1]) == 2
    ex = np.zeros((1, 4), dtype=bool)
    ex[0, 1] = True
    assert batch_ranks(scores[None], np.array([3]), ex)[0] == 2


def toy_dataset():
    seqs = [UserSequence(u, [1 + (u + j) % 4 for j in range(4 + u)], list(range(4 + u))) for u in range(5)]
    return Dataset(seqs, ["", "a", "b", "c", "d"], [f"u{u}" for u in range(5)])


@pytest.mark.parametrize("split", ["valid", "test"])
def test_evaluate_matches_loop_oracle(split):
    from rote.backbone import final_hidden, score_items
    from rote.datasets import window

    ds = toy_dataset()
    model = init_parameters(ModelConfig(vocab_size=5, d_model=8, n_heads=2, max_len=6), seed=3)
    m = evaluate(model, ds, split, ks=(1, 3))
    ranks = []
    for seq in ds.sequences:
        cut = -2 if split == "valid" else -1
        ids, ts, trip, pad = window(seq.items[:cut], seq.timestamps[:cut], 6)
        from rote.datasets import SequenceBatch
        batch = SequenceBatch(ids[None], trip[None], ts[None], pad[None], np.zeros((1,), dtype=np.int64))
        scores = score_items(final_hidden(model, batch)[0], model)
        target = seq.items[cut]
        ranks.append(oracle_rank(np.where(np.isinf(scores), -1e300, scores), target))
    for k in (1, 3):
        assert m.recall_at[k] == pytest.approx(np.mean([r <= k for r in ranks]))
        assert m.ndcg_at[k] == pytest.approx(np.mean([1 / math.log2(r + 1) if r <= k else 0 for r in ranks]))


def test_evaluate_is_deterministic_and_chunk_independent():
    ds = toy_dataset()
    model = init_parameters(ModelConfig(vocab_size=5, d_model=8, n_heads=2, max_len=6), seed=1)
    a = evaluate(model, ds, "test")
    b = evaluate(model, ds, "test", chunk=2)
    assert np.array_equal(a.ranks, b.ranks)


def test_empty_split_errors():
    ds = Dataset([], [""], [])
    model = init_parameters(ModelConfig(vocab_size=1, d_model=4, n_heads=1, max_len=3))
    with pytest.raises(ValueError):
        evaluate(model, ds, "test")


def test_write_metrics_format(tmp_path):
    m = metrics_from_ranks(np.array([1, 11]), (5, 10))
    write_metrics(tmp_path / "m.tsv", {"test": m})
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert lines[2] == "test\t10\t0.500000\t0.500000\t2"
