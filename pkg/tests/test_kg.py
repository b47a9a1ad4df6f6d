import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_graph
from relmp.kg import (KnowledgeGraph, ParseError, apply_split_manifest, degree_stats, load_dataset,
                      make_inductive_split, read_split_manifest, write_dataset, write_split_manifest)


def _write(d, train, valid="", test=""):
    d.mkdir(parents=True, exist_ok=True)
    (d / "train.txt").write_text(train)
    (d / "valid.txt").write_text(valid)
    (d / "test.txt").write_text(test)
    return d


def test_two_line_file(tmp_path):
    ds = load_dataset(_write(tmp_path / "toy", "a\tr1\tb\nb\tr2\tc\n"))
    g = ds.graph
    assert (g.n_entities, g.n_edges) == (3, 2)
    b = ds.entities.index("b")
    assert g.incident(b).tolist() == [0, 1]


def test_empty_train_is_an_error(tmp_path):
    with pytest.raises(ParseError, match="empty training set"):
        load_dataset(_write(tmp_path / "e", ""))


def test_malformed_line_reports_line_number(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(_write(tmp_path / "m", "a\tr\tb\na\tr\n"))


def test_unseen_relation_warns_but_loads(tmp_path, caplog):
    ds = load_dataset(_write(tmp_path / "w", "a\tr1\tb\n", "a\tr9\tb\n", "b\tr1\ta\n"))
    assert ds.n_relations == 2
    assert "absent from training" in caplog.text
    assert ds.graph.n_edges == 1


def test_first_appearance_ids_and_dictionary_order(tmp_path):
    d = _write(tmp_path / "ids", "x\tp\ty\n", "z\tq\tx\n", "")
    ds = load_dataset(d)
    assert ds.entities == ["x", "y", "z"]
    assert ds.relations == ["p", "q"]
    (d / "entities.dict").write_text("0\tz\n1\ty\n2\tx\n")
    ds2 = load_dataset(d)
    assert ds2.entities == ["z", "y", "x"]
    assert ds2.train.tolist() == [[2, 0, 1]]


def test_duplicates_are_dropped(tmp_path, caplog):
    ds = load_dataset(_write(tmp_path / "d", "a\tr\tb\na\tr\tb\nb\tr\ta\n"))
    assert len(ds.train) == 2
    assert "duplicate" in caplog.text


def test_write_load_roundtrip(tmp_path, rng):
    g = random_graph(rng, 12, 30, 4)
    arr = np.unique(g.as_array(), axis=0)
    ents = [f"n{i}" for i in range(12)]
    rels = [f"r{i}" for i in range(4)]
    write_dataset(tmp_path / "rt", ents, rels, arr[:20], arr[20:25], arr[25:])
    ds = load_dataset(tmp_path / "rt")
    assert ds.entities == ents and ds.relations == rels
    assert np.array_equal(ds.train, arr[:20])
    assert np.array_equal(ds.test, arr[25:])


def test_graph_save_load(tmp_path, rng):
    g = random_graph(rng, 10, 25, 3)
    g.save(tmp_path / "g.npz")
    g2 = KnowledgeGraph.load(tmp_path / "g.npz")
    assert g2 == g
    assert np.array_equal(g2.indptr, g.indptr) and np.array_equal(g2.inc_edge, g.inc_edge)


def test_self_loop_listed_twice():
    g = KnowledgeGraph([(0, 0, 0), (0, 1, 1)], 2, 2)
    assert g.incident(0).tolist() == [0, 0, 1]
    assert g.degrees().tolist() == [3, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 80), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_incidence_invariants(n, m, r, seed):
    g = random_graph(np.random.default_rng(seed), n, m, r)
    assert g.degrees().sum() == 2 * m
    assert ((g.inc_edge >= 0) & (g.inc_edge < max(m, 1))).all() or m == 0
    for v in range(n):
        inc = g.incident(v)
        assert (np.diff(inc) >= 0).all()
        for e, w in zip(inc, g.other_end(v)):
            assert v in g.endpoints(e) and w in g.endpoints(e)
    if m:
        raw = np.bincount(np.concatenate([g.heads, g.tails]), minlength=n)
        st_ = degree_stats(g)
        assert st_.mean_degree == pytest.approx(raw.mean())
        assert st_.var_degree == pytest.approx(raw.var(), abs=1e-9)


def test_degree_stats_examples():
    tri = KnowledgeGraph([(0, 0, 1), (1, 0, 2), (2, 0, 0)], 3, 1)
    s = degree_stats(tri)
    assert (s.mean_degree, s.var_degree) == (2.0, 0.0)
    path = KnowledgeGraph([(0, 0, 1), (1, 0, 2)], 3, 1)
    s = degree_stats(path)
    assert s.mean_degree == pytest.approx(4 / 3)
    assert s.var_degree == pytest.approx(2 / 9)


class TestInductiveSplit:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.g = random_graph(rng, 40, 120, 4, self_loops=False)
        self.test = random_graph(rng, 40, 30, 4).as_array()

    def test_ratio_zero_is_identity(self):
        s = make_inductive_split(self.g, self.test, 0.0, 3)
        assert s.train_graph == self.g and s.eval_graph == self.g
        assert not s.removed_entities

    def test_ratio_one_removes_every_test_entity(self):
        s = make_inductive_split(self.g, self.test, 1.0, 3)
        assert s.removed_entities == set(np.unique(self.test[:, [0, 2]]).tolist())
        tg = s.train_graph
        for e in range(tg.n_edges):
            assert tg.heads[e] not in s.removed_entities and tg.tails[e] not in s.removed_entities

    def test_eval_graph_contains_train_graph(self):
        s = make_inductive_split(self.g, self.test, 0.5, 3)
        ev = {tuple(x) for x in s.eval_graph.as_array().tolist()}
        assert {tuple(x) for x in s.train_graph.as_array().tolist()} <= ev
        assert np.array_equal(s.train_graph.as_array(), self.g.as_array()[s.kept_edges])

    def test_removed_count_is_floor(self):
        n = len(np.unique(self.test[:, [0, 2]]))
        s = make_inductive_split(self.g, self.test, 0.37, 1)
        assert len(s.removed_entities) == int(np.floor(0.37 * n))

    def test_nested_across_ratios(self):
        prev = set()
        for ratio in np.linspace(0, 1, 11):
            cur = make_inductive_split(self.g, self.test, ratio, 9).removed_entities
            assert prev <= cur
            prev = cur

    def test_manifest_is_reproducible(self, tmp_path):
        a = make_inductive_split(self.g, self.test, 0.5, 7)
        b = make_inductive_split(self.g, self.test, 0.5, 7)
        write_split_manifest(a, tmp_path / "a.json")
        write_split_manifest(b, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        doc = read_split_manifest(tmp_path / "a.json")
        assert set(json.loads((tmp_path / "a.json").read_text())) == {"ratio", "seed", "removed_entity_ids"}
        again = apply_split_manifest(self.g, doc)
        assert again.train_graph == a.train_graph

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            make_inductive_split(self.g, self.test, 1.5, 0)
