import math

import numpy as np
import pytest

from yolor.ccm import (IndexMatrix, argmax_list, build_cache, build_index_matrix, enumerate_subsets,
                       load_or_build_index, permutation_rank, permutation_table, rerank, score_all_permutations)
from yolor.config import ConfigError
from yolor.errors import ConsistencyError, FormatError, InputError, ResourceError
from yolor.instrument import counting
from yolor.irm import semantic_encode
from yolor.tcem import score_list, set_attention, tree_blocks

from conftest import make_request, random_params, small_config


def brute_force_subsets(n, m):
    sizes = []
    b = m
    while b >= 2:
        sizes.append(b)
        b //= 2
    out = []
    for mask in range(1 << n):
        s = tuple(i for i in range(n) if mask >> i & 1)
        if len(s) in sizes:
            out.append(s)
    return out


def test_subset_counts_examples():
    assert len(enumerate_subsets(8, 8)) == 99
    assert enumerate_subsets(2, 2) == [(0, 1)]
    assert len(enumerate_subsets(4, 4)) == 7


@pytest.mark.parametrize("n,m", [(n, m) for n in range(2, 11) for m in (2, 4, 8) if m <= n])
def test_subset_enumeration_matches_power_set(n, m):
    keys = enumerate_subsets(n, m)
    assert sorted(keys) == sorted(brute_force_subsets(n, m))
    assert len(set(keys)) == len(keys)
    sizes = [len(k) for k in keys]
    assert sizes == sorted(sizes, reverse=True)
    assert all(list(k) == sorted(k) for k in keys)


def test_subsets_reject_m_above_n():
    with pytest.raises(InputError):
        enumerate_subsets(3, 4)
    with pytest.raises(ConfigError):
        enumerate_subsets(6, 6)


def test_build_cache_counts_and_lookup():
    cfg = small_config(m=8, n=8)
    params = random_params(cfg)
    X_s = np.random.default_rng(0).normal(size=(8, 8))
    with counting() as c:
        cache = build_cache(X_s, params)
    assert c.set_attention == 99
    assert cache.stored_embeddings == 107
    assert [cache.slot(k) for k in cache.keys] == list(range(99))
    np.testing.assert_allclose(cache.lookup((0, 1)), set_attention(X_s[[0, 1]], params), atol=1e-12)
    np.testing.assert_allclose(cache.lookup((1, 0)), cache.lookup((0, 1)))

    cfg2 = small_config(m=2, n=2)
    with counting() as c:
        build_cache(np.ones((2, 8)), random_params(cfg2))
    assert c.set_attention == 1


def test_index_matrix_shapes():
    assert build_index_matrix(8, 8).shape == (40320, 8, 3)
    assert build_index_matrix(5, 4).shape == (120, 4, 2)
    im = build_index_matrix(2, 2)
    assert im.shape == (2, 2, 1)
    assert im.perms.tolist() == [[0, 1], [1, 0]]
    assert np.all(im.index == 0)
    with pytest.raises(ConfigError):
        build_index_matrix(5, 5)
    with pytest.raises(ResourceError):
        build_index_matrix(8, 8, max_permutations=1000)


def test_permutation_table_is_lexicographic_and_distinct():
    perms = permutation_table(5, 3)
    assert perms.shape == (60, 3)
    rows = [tuple(r) for r in perms.tolist()]
    assert rows == sorted(rows) and len(set(rows)) == 60
    for i, r in enumerate(rows):
        assert permutation_rank(r, 5) == i


@pytest.mark.parametrize("n,m", [(4, 4), (5, 4), (6, 2), (8, 8)])
def test_index_matrix_validity(n, m):
    im = build_index_matrix(n, m)
    keys = enumerate_subsets(n, m)
    layout = tree_blocks(m)
    sample = range(0, im.P, max(1, im.P // 500))
    for p in sample:
        perm = im.perms[p]
        for t in range(m):
            for k in range(layout.depth):
                s, e = layout.block_of(t, k + 1)
                assert keys[im.index[p, t, k]] == tuple(sorted(perm[s:e].tolist()))
    if n == m:
        assert set(np.unique(im.index).tolist()) == set(range(len(keys)))


def test_index_file_round_trip(tmp_path):
    im = build_index_matrix(5, 4)
    im.save(tmp_path / "i.bin")
    for mmap in (True, False):
        back = IndexMatrix.load(tmp_path / "i.bin", mmap=mmap)
        assert (back.n, back.m, back.P, back.L) == (5, 4, 120, 2)
        assert np.array_equal(back.perms, im.perms) and np.array_equal(back.index, im.index)
    raw = (tmp_path / "i.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTANIDX" + raw[8:])
    with pytest.raises(FormatError):
        IndexMatrix.load(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        IndexMatrix.load(tmp_path / "short.bin")


def test_index_header_is_little_endian(tmp_path):
    build_index_matrix(2, 2).save(tmp_path / "i.bin")
    raw = (tmp_path / "i.bin").read_bytes()
    assert raw[:8] == b"YOLORIDX"
    assert int.from_bytes(raw[8:10], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 2


def test_load_or_build_reuses_file(tmp_path):
    layout = tree_blocks(4)
    a = load_or_build_index(4, 4, layout, tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    b = load_or_build_index(4, 4, layout, tmp_path)
    assert np.array_equal(a.index, b.index)


@pytest.mark.parametrize("m", [2, 4])
def test_cached_scores_match_naive_full_space(m):
    cfg = small_config(m=m, n=m)
    params = random_params(cfg, seed=m)
    X_s = semantic_encode(make_request(m, seed=m), params)
    im = build_index_matrix(m, m)
    scores = score_all_permutations(build_cache(X_s, params), im, params)
    naive = np.array([score_list(p, X_s, params)[1] for p in im.perms])
    assert np.abs(scores - naive).max() <= 1e-6
    assert np.all((scores > 0) & (scores < m))


def test_cached_scores_match_naive_n_above_m():
    cfg = small_config(m=4, n=6)
    params = random_params(cfg, seed=9)
    X_s = semantic_encode(make_request(6, seed=9), params)
    im = build_index_matrix(6, 4)
    w = [1.0, 0.5, 0.25, 2.0]
    scores = score_all_permutations(build_cache(X_s, params), im, params, weights=w, chunk_size=37, workers=3)
    naive = np.array([score_list(p, X_s, params, weights=w)[1] for p in im.perms])
    assert np.abs(scores - naive).max() <= 1e-6


def test_within_pair_swap_changes_only_item_terms():
    cfg = small_config(m=4, n=4)
    params = random_params(cfg)
    X_s = np.random.default_rng(1).normal(size=(4, 8))
    cache = build_cache(X_s, params)
    im = build_index_matrix(4, 4)
    a, b = permutation_rank([0, 1, 2, 3], 4), permutation_rank([1, 0, 2, 3], 4)
    assert np.array_equal(im.index[a], im.index[b])
    params["pos_emb"].value[...] = 0.0
    w = params["head_w"].value
    w[8:16] = 0.0  # item term off: swapped lists now see identical inputs
    s = score_all_permutations(cache, im, params)
    assert s[a] == s[b]


def test_mismatched_cache_and_index():
    cfg = small_config(m=4, n=4)
    params = random_params(cfg)
    cache = build_cache(np.zeros((4, 8)), params)
    with pytest.raises(ConsistencyError):
        score_all_permutations(cache, build_index_matrix(5, 4), params)


def test_argmax_tie_break_and_errors():
    assert argmax_list([0.1, 0.9, 0.9])[0] == 1
    assert argmax_list([0.3])[0] == 0
    with pytest.raises(InputError):
        argmax_list([])


def test_argmax_recovers_planted_list():
    # scorer that fits a planted best list perfectly: score = number of positions matching it
    perms = permutation_table(5, 3)
    planted = [3, 0, 4]
    scores = (perms == np.array(planted)).sum(axis=1).astype(float)
    best = max(range(len(perms)), key=lambda i: (scores[i], -i))
    idx, perm, _ = argmax_list(scores, perms)
    assert perm == planted and idx == best


def test_rerank_small_and_deterministic():
    cfg = small_config(m=2, n=2)
    params = random_params(cfg)
    req = make_request(2, seed=3)
    a, b = rerank(req, params), rerank(req, params)
    assert a.best_permutation in ([0, 1], [1, 0])
    assert a.best_permutation == b.best_permutation and a.best_score == b.best_score
    assert a.best_items == [req.candidate_item_ids[i] for i in a.best_permutation]


def test_rerank_telemetry_m8():
    cfg = small_config(m=8, n=8)
    params = random_params(cfg)
    res = rerank(make_request(8, seed=4), params)
    assert res.telemetry["set_attention"] == 99
    assert res.telemetry["head_evals"] == 40320 * 8
    assert res.telemetry["feature_cross_rows"] == 8
    assert set(res.telemetry["timings_s"]) >= {"irm", "build_cache", "score"}


def test_counters_do_not_change_scores():
    cfg = small_config(m=4, n=5)
    params = random_params(cfg)
    req = make_request(5, seed=5)
    with counting(enabled=True):
        on = rerank(req, params)
    with counting(enabled=False) as c:
        off = rerank(req, params)
        assert c.set_attention == 0
    assert on.best_score == off.best_score and on.best_permutation == off.best_permutation


def test_no_tcem_variant_uses_whole_list_keys():
    cfg = small_config(m=4, n=5, ablate=("tcem",))
    params = random_params(cfg)
    req = make_request(5, seed=6)
    res = rerank(req, params)
    assert res.telemetry["set_attention"] == math.comb(5, 4)
    X_s = semantic_encode(req, params)
    assert abs(res.best_score - score_list(res.best_permutation, X_s, params)[1]) < 1e-9


def test_per_level_parameters_variant():
    cfg = small_config(m=8, n=8, per_level_set_attention=True)
    params = random_params(cfg)
    assert {"sa1_wq", "sa2_wq", "sa3_wq"} <= set(params)
    X_s = np.random.default_rng(7).normal(size=(8, 8))
    im = build_index_matrix(8, 8)
    scores = score_all_permutations(build_cache(X_s, params), im, params)
    for p in np.random.default_rng(0).choice(im.P, 50, replace=False):
        assert abs(scores[p] - score_list(im.perms[p], X_s, params)[1]) <= 1e-6
