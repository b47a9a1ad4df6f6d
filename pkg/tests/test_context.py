import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_graph
from relmp import autodiff as ad
from relmp import context as C
from relmp.kg import KnowledgeGraph
from relmp.params import ParameterStore


def _params(kind, feat, hidden, n_rel, hops, rng, bias_scale=0.3):
    store = ParameterStore()
    C.init_context_params(store, kind, feat, hidden, n_rel, hops, rng)
    for k, v in store.values.items():
        if k.endswith(".b"):
            v[:] = rng.normal(size=v.shape) * bias_scale
    return store


def _reference(g, heads, tails, masks, params, hops, kind):
    out = []
    for h, t, q in zip(heads, tails, masks):
        mh, mt = C.run_context_passing(g, (h, t), q if q >= 0 else None, params, hops, kind)
        out.append(C.pair_context(mh, mt, params, kind, hops))
    return np.array(out)


def test_node_aggregate_star():
    g = KnowledgeGraph([(0, 0, 1), (0, 0, 2), (0, 1, 3)], 4, 2)
    m = C.node_aggregate(g, C.edge_features(g))
    assert m[0].tolist() == [2, 1]


def test_node_aggregate_masks_only_edge():
    g = KnowledgeGraph([(0, 0, 1), (1, 1, 2)], 3, 2)
    m = C.node_aggregate(g, C.edge_features(g), masked_edge=0)
    assert m[0].tolist() == [0, 0]
    assert m[1].tolist() == [0, 1]


def test_node_aggregate_triangle():
    g = KnowledgeGraph([(0, 0, 1), (1, 0, 2), (2, 0, 0)], 3, 1)
    assert C.node_aggregate(g, C.edge_features(g)).ravel().tolist() == [2, 2, 2]


def test_mean_update_zero_in_zero_out(rng):
    store = _params("mean", 3, 4, 2, 2, rng, bias_scale=0.0)
    z = np.zeros(3)
    assert not C.edge_update(z, z, z, store.values, 0, "mean").any()


def test_cross_outer_product_layout():
    W1 = np.eye(4)
    params = {"ctx.0.W1": W1, "ctx.0.W2": np.zeros((2, 4)), "ctx.0.b": np.zeros(4)}
    out = C.edge_update(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2), params, 0, "cross",
                        activation=lambda x: x)
    assert out.tolist() == [0, 1, 0, 0]


def test_update_dimension_mismatch(rng):
    store = _params("concat", 3, 4, 2, 2, rng)
    with pytest.raises(ValueError, match="dimension mismatch"):
        C.edge_update(np.zeros(3), np.zeros(2), np.zeros(3), store.values, 0, "concat")


def test_endpoint_order(rng):
    mv, mu, se = rng.standard_normal((3, 5))
    for kind in C.AGGREGATORS:
        store = _params(kind, 5, 6, 3, 2, rng)
        a = C.edge_update(mv, mu, se, store.values, 0, kind, activation=lambda x: x)
        b = C.edge_update(mu, mv, se, store.values, 0, kind, activation=lambda x: x)
        if kind == "mean":
            np.testing.assert_array_equal(a, b)
        else:
            assert not np.allclose(a, b)
    store = _params("concat", 5, 6, 3, 1, rng)
    assert not np.allclose(C.pair_context(mv, mu, store.values, "concat", 1),
                           C.pair_context(mu, mv, store.values, "concat", 1))


def test_pair_context_zero_messages(rng):
    for kind in C.AGGREGATORS:
        store = _params(kind, 3, 4, 3, 1, rng, bias_scale=0.0)
        assert not C.pair_context(np.zeros(3), np.zeros(3), store.values, kind, 1).any()


def test_one_hop_is_relation_histogram(rng):
    g = random_graph(rng, 8, 25, 4)
    for q in [None, 0, 7]:
        for h in range(8):
            mh, _ = C.run_context_passing(g, (h, 0), q, {}, 1)
            hist = np.zeros(4)
            for e in g.incident(h):
                if e != q:
                    hist[g.relations[e]] += 1
            np.testing.assert_array_equal(mh, hist)


def test_layer_shapes(rng):
    store = _params("concat", 14, 64, 14, 3, rng)
    shapes = {k: v.shape for k, v in store.values.items()}
    assert shapes == {"ctx.0.W": (42, 64), "ctx.0.b": (64,), "ctx.1.W": (192, 64), "ctx.1.b": (64,),
                      "ctx.2.W": (128, 14), "ctx.2.b": (14,)}
    C.check_context_params(store.values, "concat", 14, 64, 14, 3)
    with pytest.raises(ValueError, match="ctx.1.W"):
        bad = dict(store.values)
        bad["ctx.1.W"] = np.zeros((10, 64))
        C.check_context_params(bad, "concat", 14, 64, 14, 3)


@pytest.mark.parametrize("kind", C.AGGREGATORS)
@pytest.mark.parametrize("hops", [1, 2, 3, 4])
def test_batched_matches_full_graph_recomputation(kind, hops):
    rng = np.random.default_rng(hops * 17 + len(kind))
    for _ in range(6):
        n, m, r = int(rng.integers(3, 10)), int(rng.integers(1, 20)), int(rng.integers(1, 4))
        g = random_graph(rng, n, m, r)
        store = _params(kind, r, 5, r, hops, rng)
        masks = list(range(m)) + [-1, -1]
        heads = [int(g.heads[q]) if q >= 0 else int(rng.integers(n)) for q in masks]
        tails = [int(g.tails[q]) if q >= 0 else int(rng.integers(n)) for q in masks]
        enc = C.ContextEncoder(kind, hops)
        P = {k: ad.Tensor(v) for k, v in store.values.items()}
        got = enc.forward(P, g, heads, tails, masks).data
        np.testing.assert_allclose(got, _reference(g, heads, tails, masks, store.values, hops, kind), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(C.AGGREGATORS), st.integers(1, 3))
def test_masked_edge_cannot_leak(seed, kind, hops):
    # changing the masked edge's relation must not change the output at all
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 7, 14, 3)
    store = _params(kind, 3, 4, 3, hops, rng)
    q = int(rng.integers(g.n_edges))
    arr = g.as_array()
    arr[q, 1] = (arr[q, 1] + 1) % 3
    g2 = KnowledgeGraph(arr, 7, 3)
    pair = (int(g.heads[q]), int(g.tails[q]))
    for graph in (g, g2):
        mh, mt = C.run_context_passing(graph, pair, q, store.values, hops, kind)
        out = C.pair_context(mh, mt, store.values, kind, hops)
        if graph is g:
            first = out
    np.testing.assert_array_equal(first, out)
    enc = C.ContextEncoder(kind, hops)
    P = {k: ad.Tensor(v) for k, v in store.values.items()}
    a = enc.forward(P, g, [pair[0]], [pair[1]], [q]).data
    b = C.ContextEncoder(kind, hops).forward(P, g2, [pair[0]], [pair[1]], [q]).data
    # the batched path patches unmasked sums, so equality holds up to rounding
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_isolated_after_masking_gives_zero_message(rng):
    g = KnowledgeGraph([(0, 1, 1), (1, 0, 2), (2, 0, 3)], 4, 2)
    store = _params("concat", 2, 4, 2, 2, rng)
    mh, _ = C.run_context_passing(g, (0, 1), 0, store.values, 2, "concat")
    assert not mh.any()
