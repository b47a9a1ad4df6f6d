from collections import Counter

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_graph
from relmp import autodiff as ad
from relmp.kg import KnowledgeGraph
from relmp.params import ParameterStore
from relmp.paths import (PathEncoder, PathVocabulary, aggregate_paths, build_vocabulary, cache_key,
                         cached_path_sets, compute_path_sets, count_paths, decode_path, encode_path,
                         enumerate_paths, enumerate_raw_paths, init_path_params, path_representation,
                         read_path_cache, write_path_cache)

H, A, T = 0, 1, 2
R1, R2, R3 = 0, 1, 2


@pytest.fixture
def toy():
    # h -r1- a -r2- t and h -r3- t; edge 3 is unrelated
    return KnowledgeGraph([(H, R1, A), (A, R2, T), (H, R3, T), (3, R1, 4)], 5, 3)


def test_mask_direct_edge(toy):
    assert enumerate_paths(toy, H, T, 2, masked_edge=2) == [(R1, R2)]


def test_unrelated_mask(toy):
    assert enumerate_paths(toy, H, T, 2, masked_edge=3) == [(R1, R2), (R3,)]
    assert enumerate_raw_paths(toy, H, T, 2, masked_edge=3) == [(0, 1), (2,)]


def test_no_connection(toy):
    assert enumerate_paths(toy, H, 3, 4) == []
    assert enumerate_paths(toy, H, H, 4) == []
    assert enumerate_paths(toy, H, T, 1, masked_edge=2) == []


def test_multiplicity_kept():
    g = KnowledgeGraph([(0, 0, 1), (0, 0, 2), (1, 1, 3), (2, 1, 3)], 4, 2)
    assert enumerate_paths(g, 0, 3, 2) == [(0, 1), (0, 1)]
    ps = compute_path_sets(g, [0], [3], [-1], 2)
    assert ps.paths_of(0) == [((0, 1), 2)]


def _oracle(g, h, t, max_len, q):
    if h == t:
        return Counter()
    G = nx.MultiGraph()
    G.add_nodes_from(range(g.n_entities))
    for e in range(g.n_edges):
        if e != q:
            G.add_edge(int(g.heads[e]), int(g.tails[e]), key=e)
    return Counter(tuple(int(g.relations[k]) for _, _, k in p)
                   for p in nx.all_simple_edge_paths(G, h, t, cutoff=max_len))


def test_matches_networkx_on_random_graphs():
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(2, 8))
        g = random_graph(rng, n, int(rng.integers(1, 14)), int(rng.integers(1, 4)))
        for q in [None] + list(range(g.n_edges)):
            for h in range(n):
                for t in range(n):
                    for L in range(1, 5):
                        got = enumerate_paths(g, h, t, L, q)
                        assert Counter(got) == _oracle(g, h, t, L, -1 if q is None else q)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bulk_counter_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    g = random_graph(rng, n, int(rng.integers(1, 18)), int(rng.integers(1, 4)))
    heads, tails, masks = [], [], []
    for h in range(n):
        for t in range(n):
            heads.append(h)
            tails.append(t)
            masks.append(int(rng.integers(-1, g.n_edges)))
    for L in range(1, 5):
        ps = compute_path_sets(g, heads, tails, masks, L)
        for i, (h, t, q) in enumerate(zip(heads, tails, masks)):
            assert Counter(dict(ps.paths_of(i))) == Counter(enumerate_paths(g, h, t, L, None if q < 0 else q))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_raw_path_properties(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 7, 16, 3)
    q = int(rng.integers(g.n_edges))
    h, t = int(rng.integers(7)), int(rng.integers(7))
    prev = set()
    for L in range(1, 5):
        raw = enumerate_raw_paths(g, h, t, L, q)
        assert raw == sorted(raw)
        assert prev <= set(raw)
        prev = set(raw)
        for p in raw:
            assert q not in p and len(p) <= L
            nodes = [h]
            for e in p:
                a, b = g.endpoints(e)
                assert nodes[-1] in (a, b)
                nodes.append(b if nodes[-1] == a else a)
            assert nodes[-1] == t and len(set(nodes)) == len(nodes)


def test_path_codes_roundtrip():
    for R in (1, 3, 14):
        for seq in [(0,), (R - 1,), (0, R - 1, 0), (R - 1,) * 4]:
            assert decode_path(encode_path(seq, R), R) == seq
    with pytest.raises(ValueError):
        count_paths(KnowledgeGraph([(0, 0, 1)], 2, 1), [0], [1], [-1], 5)


def test_vocabulary(toy):
    vocab = build_vocabulary(toy, toy.as_array()[:3], 2)
    # each training pair with its own edge masked
    assert vocab.paths == [(R1, R2), (R1, R3), (R3, R2)]
    assert vocab[(R1, R2)] == 0 and vocab.oov_id == 3
    assert vocab[(R3,)] == vocab.oov_id
    assert vocab.ids_for_codes([encode_path((R3, R2), 3), encode_path((R3,), 3)]).tolist() == [2, 3]
    empty = build_vocabulary(KnowledgeGraph([(0, 0, 1)], 2, 1), [(0, 0, 1)], 3)
    assert len(empty) == 0 and empty.oov_id == 0


def test_cache_roundtrip(tmp_path, rng):
    g = random_graph(rng, 9, 25, 3)
    heads, tails = rng.integers(0, 9, 20), rng.integers(0, 9, 20)
    masks = rng.integers(-1, 25, 20)
    ps = compute_path_sets(g, heads, tails, masks, 3)
    key = cache_key(g, heads, tails, masks, 3)
    write_path_cache(tmp_path / "c.bin", ps, key)
    back = read_path_cache(tmp_path / "c.bin", key)
    for a in ("offsets", "codes", "counts"):
        assert np.array_equal(getattr(back, a), getattr(ps, a))
    with pytest.raises(ValueError, match="different data"):
        read_path_cache(tmp_path / "c.bin", b"\0" * 32)
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "c.bin").read_bytes()[4:])
    with pytest.raises(ValueError, match="not a path cache"):
        read_path_cache(tmp_path / "bad.bin")
    first = cached_path_sets(g, heads, tails, masks, 3, tmp_path / "cache")
    second = cached_path_sets(g, heads, tails, masks, 3, tmp_path / "cache")
    assert len(list((tmp_path / "cache").iterdir())) == 1
    assert np.array_equal(first.codes, second.codes)


def test_aggregate_examples():
    s = np.array([[1.0, -2.0, 0.5]])
    agg, w = aggregate_paths(s, np.array([3.0, 1.0, 0.0]))
    assert w.tolist() == [1.0] and np.array_equal(agg, s[0])
    agg, w = aggregate_paths(np.ones((2, 3)), np.array([1.0, 2.0, 3.0]))
    assert w.tolist() == [0.5, 0.5]
    S = np.array([[1.0, 0.0], [3.0, 2.0]])
    agg, w = aggregate_paths(S, np.zeros(2))
    np.testing.assert_allclose(agg, [2.0, 1.0])
    agg, w = aggregate_paths(np.zeros((0, 2)), np.ones(2))
    assert agg.tolist() == [0.0, 0.0] and len(w) == 0
    agg, _ = aggregate_paths(S, kind="mean")
    np.testing.assert_allclose(agg, [2.0, 1.0])
    with pytest.raises(ValueError):
        aggregate_paths(S, None, "attention")


def test_counts_equal_repeated_rows():
    rng = np.random.default_rng(3)
    S = rng.standard_normal((3, 4))
    ctx = rng.standard_normal(4)
    counts = np.array([2, 1, 3])
    rep = np.repeat(S, counts, axis=0)
    for kind in ("attention", "mean"):
        a, _ = aggregate_paths(S, ctx, kind, counts)
        b, _ = aggregate_paths(rep, ctx, kind)
        np.testing.assert_allclose(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_attention_weight_invariants(n, shift, seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((n, 4)) * 3
    ctx = rng.standard_normal(4)
    _, w = aggregate_paths(S, ctx)
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-6
    # adding the same constant to every logit leaves the weights alone
    c = ctx / (ctx @ ctx)
    _, w2 = aggregate_paths(S + shift * c, ctx)
    np.testing.assert_allclose(w, w2, atol=1e-9)


def test_path_representation(rng):
    store = ParameterStore()
    init_path_params(store, "embedding", 3, 5, 8, rng)
    table = store["path.emb"]
    assert table.shape == (6, 3) and not table[5].any()
    a = path_representation([2, 2, 5], store.values, "embedding")
    np.testing.assert_array_equal(a[0], a[1])
    assert not a[2].any()
    with pytest.raises(IndexError):
        path_representation([6], store.values, "embedding")
    small, big = ParameterStore(), ParameterStore()
    init_path_params(small, "rnn", 3, 5, 8, rng)
    init_path_params(big, "rnn", 3, 5000, 8, rng)
    assert small.n_parameters() == big.n_parameters()
    out = path_representation([(1,)], small.values, "rnn")[0]
    v = small.values
    expect = np.tanh(v["rnn.rel_emb"][1] @ v["rnn.Wx"] + v["rnn.b"]) @ v["rnn.Wo"] + v["rnn.bo"]
    np.testing.assert_allclose(out, expect)


@pytest.mark.parametrize("kind", ["embedding", "rnn"])
@pytest.mark.parametrize("agg", ["attention", "mean"])
def test_encoder_matches_numpy(kind, agg):
    rng = np.random.default_rng(8)
    g = random_graph(rng, 8, 24, 3)
    heads, tails = rng.integers(0, 8, 12), rng.integers(0, 8, 12)
    masks = rng.integers(-1, 24, 12)
    ps = compute_path_sets(g, heads, tails, masks, 3)
    vocab = PathVocabulary.from_path_sets(compute_path_sets(g, heads[:6], tails[:6], masks[:6], 3))
    store = ParameterStore()
    init_path_params(store, kind, 3, len(vocab), 5, rng)
    ctx = rng.standard_normal((12, 3))
    P = {k: ad.Tensor(v) for k, v in store.values.items()}
    enc = PathEncoder(kind, agg, vocab)
    got = enc.forward(P, ps, np.arange(12), ad.Tensor(ctx)).data
    for i in range(12):
        items = ps.paths_of(i)
        if not items:
            assert not got[i].any()
            continue
        seqs, counts = zip(*items)
        if kind == "embedding":
            S = path_representation([vocab[s] for s in seqs], store.values, kind)
        else:
            S = path_representation(list(seqs), store.values, kind)
        ref, _ = aggregate_paths(S, ctx[i], agg, counts)
        np.testing.assert_allclose(got[i], ref, atol=1e-12)
