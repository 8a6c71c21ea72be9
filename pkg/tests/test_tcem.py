import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yolor.config import ConfigError
from yolor.errors import InputError
from yolor.instrument import counting
from yolor.tcem import (context_stack_for_list, context_stacks, predict_item_pctr, score_list, score_lists,
                        set_attention, tree_blocks)

from conftest import random_params, small_config


def test_tree_blocks_m2():
    layout = tree_blocks(2)
    assert layout.levels == (((0, 2),),)


def test_tree_blocks_m8_position4():
    layout = tree_blocks(8)
    assert layout.depth == 3
    assert layout.block_sizes == (8, 4, 2)
    assert [len(lvl) for lvl in layout.levels] == [1, 2, 4]
    assert layout.block_count == 7
    # 1-indexed position 4 -> blocks [1..8], [1..4], [3..4]
    assert [layout.block_of(3, k) for k in (1, 2, 3)] == [(0, 8), (0, 4), (2, 4)]


def test_tree_blocks_m4():
    assert tree_blocks(4).levels == (((0, 4),), ((0, 2), (2, 4)))


@pytest.mark.parametrize("m", [0, 1, 3, 5, 6, 12])
def test_tree_blocks_rejects_non_powers_of_two(m):
    with pytest.raises(ConfigError):
        tree_blocks(m)


@pytest.mark.parametrize("m", [2, 4, 8, 16, 32])
def test_every_position_in_exactly_one_block_per_level(m):
    layout = tree_blocks(m)
    assert layout.block_sizes[-1] == 2 and layout.levels[0] == ((0, m),)
    for blocks in layout.levels:
        covered = sorted(t for s, e in blocks for t in range(s, e))
        assert covered == list(range(m))


def identity_sa(params):
    for name in ("sa_wq", "sa_wk", "sa_wv"):
        params[name].value[...] = np.eye(params.config.D)


def test_set_attention_single_row_is_value_projection(params4):
    row = np.random.default_rng(0).normal(size=(1, 8))
    np.testing.assert_allclose(set_attention(row, params4), row[0] @ params4["sa_wv"].value, atol=1e-12)


def test_set_attention_two_rows_hand_computed(params4):
    identity_sa(params4)
    a = np.zeros(8)
    b = np.zeros(8)
    a[0], a[1] = 1.0, 2.0
    b[0], b[2] = 3.0, -1.0
    s = 1 / math.sqrt(8)
    logits = np.array([[a @ a, a @ b], [b @ a, b @ b]]) * s
    w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    outs = w @ np.stack([a, b])
    expected = outs.mean(axis=0)
    assert np.abs(set_attention(np.stack([a, b]), params4) - expected).max() <= 1e-6


def test_set_attention_order_is_bit_exact(params4):
    rows = np.random.default_rng(1).normal(size=(2, 8))
    x = set_attention(rows, params4, item_ids=[3, 7])
    y = set_attention(rows[::-1], params4, item_ids=[7, 3])
    assert np.array_equal(x, y)


def test_set_attention_rejects_empty(params4):
    with pytest.raises(InputError):
        set_attention(np.zeros((0, 8)), params4)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_set_attention_invariance_property(data):
    params = random_params(small_config())
    k = data.draw(st.integers(1, 8))
    ids = data.draw(st.lists(st.integers(0, 100), min_size=k, max_size=k, unique=True))
    rows = np.random.default_rng(k).normal(size=(k, 8))
    order = data.draw(st.permutations(list(range(k))))
    assert np.array_equal(set_attention(rows, params, ids),
                          set_attention(rows[list(order)], params, [ids[i] for i in order]))


def test_context_stack_call_counts():
    for m, calls in ((2, 1), (4, 3), (8, 7)):
        cfg = small_config(m=m, n=m)
        params = random_params(cfg)
        X_s = np.random.default_rng(m).normal(size=(m, 8))
        with counting() as c:
            stack = context_stack_for_list(list(range(m)), X_s, params)
        assert c.set_attention == calls == m - 1
        if m == 2:
            np.testing.assert_array_equal(stack[0], stack[1])


def test_context_stack_structure_m8():
    cfg = small_config(m=8, n=8)
    params = random_params(cfg)
    X_s = np.random.default_rng(0).normal(size=(8, 8))
    stack = context_stack_for_list(list(range(8)), X_s, params).reshape(8, 3, 8)
    # positions 3 and 4 (1-indexed) share the pair level
    np.testing.assert_array_equal(stack[2, 2], stack[3, 2])
    assert not np.array_equal(stack[1, 2], stack[2, 2])
    # positions 1 and 8 only share the whole-list level
    np.testing.assert_array_equal(stack[0, 0], stack[7, 0])
    assert not np.array_equal(stack[0, 1], stack[7, 1])


def test_context_stack_rejects_duplicates(params4):
    with pytest.raises(InputError):
        context_stack_for_list([0, 1, 1, 2], np.zeros((4, 8)), params4)


def test_block_sharing_across_permutations():
    cfg = small_config(m=8, n=10)
    params = random_params(cfg)
    X_s = np.random.default_rng(2).normal(size=(10, 8))
    a = context_stack_for_list([0, 1, 2, 3, 4, 5, 6, 7], X_s, params).reshape(8, 3, 8)
    b = context_stack_for_list([3, 2, 1, 0, 9, 8, 5, 4], X_s, params).reshape(8, 3, 8)
    # first half holds the set {0,1,2,3} in both lists
    np.testing.assert_array_equal(a[0, 1], b[0, 1])
    # pair {0,1} at positions 1-2 in a, pair {1,0} at positions 3-4 in b
    np.testing.assert_array_equal(a[0, 2], b[2, 2])


def test_predict_item_pctr_zero_and_hand_set(params4):
    D = params4.config.D
    L = params4.config.levels
    params4["head_w"].value[...] = 0.0
    params4["head_b"].value[...] = 0.0
    zeros = np.zeros((4, D))
    assert predict_item_pctr(1, zeros, np.zeros(D), np.zeros(L * D), params4) == 0.5
    rng = np.random.default_rng(3)
    w = rng.normal(size=((2 + L) * D, 1))
    params4["head_w"].value[...] = w
    params4["head_b"].value[...] = 0.25
    E_p = rng.normal(size=(4, D))
    xs, ctx = rng.normal(size=D), rng.normal(size=L * D)
    z = sum(v * w[i, 0] for i, v in enumerate(np.concatenate([E_p[1], xs, ctx]))) + 0.25
    expected = 1 / (1 + math.exp(-z))
    assert abs(predict_item_pctr(2, E_p, xs, ctx, params4) - expected) <= 1e-6


def test_score_list_sums_and_weights(params4):
    X_s = np.random.default_rng(4).normal(size=(4, 8))
    per, total = score_list([2, 0, 3, 1], X_s, params4)
    assert abs(total - per.sum()) < 1e-12
    assert 0 < total < 4
    _, first = score_list([2, 0, 3, 1], X_s, params4, weights=[1, 0, 0, 0])
    assert first == per[0]


def test_score_list_all_half_gives_one():
    cfg = small_config(m=2, n=2)
    params = random_params(cfg)
    params["head_w"].value[...] = 0.0
    params["head_b"].value[...] = 0.0
    _, total = score_list([1, 0], np.ones((2, 8)), params)
    assert total == 1.0


def test_score_list_ignores_outside_candidates(params4):
    rng = np.random.default_rng(5)
    X_s = rng.normal(size=(6, 8))
    _, a = score_list([1, 3, 0, 2], X_s, params4)
    # reorder the two candidates not in the list (4, 5) and remap indices
    X2 = X_s[[0, 1, 2, 3, 5, 4]]
    _, b = score_list([1, 3, 0, 2], X2, params4)
    assert a == b


def test_batched_stacks_match_per_list(params4):
    rng = np.random.default_rng(6)
    X_s = rng.normal(size=(6, 8))
    perms = np.array([rng.permutation(6)[:4] for _ in range(20)])
    batched = context_stacks(perms, X_s, params4)
    for p, s in zip(perms, batched):
        np.testing.assert_allclose(s, context_stack_for_list(p, X_s, params4), atol=1e-12)
    totals = score_lists(perms, X_s, params4)
    np.testing.assert_allclose(totals, [score_list(p, X_s, params4)[1] for p in perms], atol=1e-12)
