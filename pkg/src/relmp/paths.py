"""Relational paths between entity pairs.

A raw path is a walk over undirected edges whose entities are pairwise
distinct; its relational path is the tuple of relation ids along it. Paths
of up to four relations are supported.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, types
from numba.typed import Dict

from . import autodiff as ad
from .kg import KnowledgeGraph

log = logging.getLogger(__name__)

MAX_PATH_LEN = 4
PATH_KINDS = ("embedding", "rnn")
PATH_AGGREGATORS = ("mean", "attention")


def enumerate_raw_paths(graph: KnowledgeGraph, h: int, t: int, max_len: int, masked_edge=None) -> list[tuple[int, ...]]:
    """Edge-id sequences of all raw paths from ``h`` to ``t`` with at most
    ``max_len`` edges, in lexicographic order."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if h == t:
        return []
    q = -1 if masked_edge is None else int(masked_edge)
    out: list[tuple[int, ...]] = []
    visited = {h}
    edges: list[int] = []

    def dfs(u):
        lo, hi = graph.indptr[u], graph.indptr[u + 1]
        for e, w in zip(graph.inc_edge[lo:hi].tolist(), graph.inc_other[lo:hi].tolist()):
            if e == q or w in visited:
                continue
            edges.append(e)
            if w == t:
                out.append(tuple(edges))
            elif len(edges) < max_len:
                visited.add(w)
                dfs(w)
                visited.discard(w)
            edges.pop()

    dfs(h)
    return out


def enumerate_paths(graph: KnowledgeGraph, h: int, t: int, max_len: int, masked_edge=None) -> list[tuple[int, ...]]:
    """All relational paths from ``h`` to ``t`` with at most ``max_len`` edges.

    Multiplicity is kept (one entry per raw path) and results come out in
    lexicographic order of their edge-id sequences.
    """
    rel = graph.relations
    return [tuple(int(rel[e]) for e in p) for p in enumerate_raw_paths(graph, h, t, max_len, masked_edge)]


# ---------------------------------------------------------------- bulk counting

def _code_offsets(n_rel: int) -> np.ndarray:
    off = np.zeros(MAX_PATH_LEN + 1, dtype=np.int64)
    acc = 0
    for k in range(1, MAX_PATH_LEN + 1):
        off[k] = acc
        acc += n_rel ** k
    return off


def encode_path(seq, n_rel: int) -> int:
    code = 0
    for r in seq:
        code = code * n_rel + int(r)
    return int(_code_offsets(n_rel)[len(seq)]) + code


def decode_path(code: int, n_rel: int) -> tuple[int, ...]:
    off = _code_offsets(n_rel)
    k = int(np.searchsorted(off[1:], code, side="right"))
    rest = int(code - off[k])
    seq = []
    for _ in range(k):
        seq.append(rest % n_rel)
        rest //= n_rel
    return tuple(reversed(seq))


@njit(cache=True)
def _count_batch(indptr, inc_edge, inc_other, rel, heads, tails, masks, max_len, n_rel, off):
    n_nodes = len(indptr) - 1
    tl_first = np.full(n_nodes, -1, np.int64)
    tl_next = np.empty(len(inc_edge), np.int64)
    tl_rel = np.empty(len(inc_edge), np.int64)
    hx_first = np.full(n_nodes, -1, np.int64)
    out_pair = []
    out_code = []
    out_count = []
    for p in range(len(heads)):
        h = heads[p]
        t = tails[p]
        q = masks[p]
        if h == t:
            continue
        counts = Dict.empty(key_type=types.int64, value_type=types.int64)
        # edges b -- t, chained per b
        nt = 0
        for i in range(indptr[t], indptr[t + 1]):
            e = inc_edge[i]
            b = inc_other[i]
            if e == q or b == t:
                continue
            tl_next[nt] = tl_first[b]
            tl_rel[nt] = rel[e]
            tl_first[b] = nt
            nt += 1
        # two-step walks h -- a -- x, chained per x
        n_hx = 0
        if max_len >= 4:
            for i in range(indptr[h], indptr[h + 1]):
                a = inc_other[i]
                if inc_edge[i] == q or a == h or a == t:
                    continue
                n_hx += indptr[a + 1] - indptr[a]
        hx_next = np.empty(n_hx, np.int64)
        hx_a = np.empty(n_hx, np.int64)
        hx_code = np.empty(n_hx, np.int64)
        n_hx = 0
        for i in range(indptr[h], indptr[h + 1]):
            e1 = inc_edge[i]
            a = inc_other[i]
            if e1 == q or a == h:
                continue
            r1 = rel[e1]
            if a == t:
                c = off[1] + r1
                counts[c] = counts.get(c, 0) + 1
                continue
            if max_len < 2:
                continue
            j = tl_first[a]
            while j >= 0:
                c = off[2] + r1 * n_rel + tl_rel[j]
                counts[c] = counts.get(c, 0) + 1
                j = tl_next[j]
            if max_len < 3:
                continue
            for k in range(indptr[a], indptr[a + 1]):
                e2 = inc_edge[k]
                x = inc_other[k]
                if e2 == q or x == h or x == t or x == a:
                    continue
                r12 = r1 * n_rel + rel[e2]
                j = tl_first[x]
                while j >= 0:
                    c = off[3] + r12 * n_rel + tl_rel[j]
                    counts[c] = counts.get(c, 0) + 1
                    j = tl_next[j]
                if max_len >= 4:
                    hx_next[n_hx] = hx_first[x]
                    hx_a[n_hx] = a
                    hx_code[n_hx] = r12
                    hx_first[x] = n_hx
                    n_hx += 1
        if max_len >= 4:
            for i in range(indptr[t], indptr[t + 1]):
                e4 = inc_edge[i]
                b = inc_other[i]
                if e4 == q or b == t or b == h:
                    continue
                r4 = rel[e4]
                for k in range(indptr[b], indptr[b + 1]):
                    e3 = inc_edge[k]
                    x = inc_other[k]
                    if e3 == q or x == h or x == t or x == b:
                        continue
                    r34 = rel[e3] * n_rel + r4
                    j = hx_first[x]
                    while j >= 0:
                        if hx_a[j] != b:
                            c = off[4] + hx_code[j] * n_rel * n_rel + r34
                            counts[c] = counts.get(c, 0) + 1
                        j = hx_next[j]
            for i in range(indptr[h], indptr[h + 1]):
                a = inc_other[i]
                for k in range(indptr[a], indptr[a + 1]):
                    hx_first[inc_other[k]] = -1
        for i in range(indptr[t], indptr[t + 1]):
            tl_first[inc_other[i]] = -1
        for c, n in counts.items():
            out_pair.append(p)
            out_code.append(c)
            out_count.append(n)
    res_pair = np.empty(len(out_pair), np.int64)
    res_code = np.empty(len(out_pair), np.int64)
    res_count = np.empty(len(out_pair), np.int64)
    for i in range(len(out_pair)):
        res_pair[i] = out_pair[i]
        res_code[i] = out_code[i]
        res_count[i] = out_count[i]
    return res_pair, res_code, res_count


def count_paths(graph: KnowledgeGraph, heads, tails, masks, max_len: int):
    """Per-query relational-path multiplicities as flat ``(query, code, count)``
    arrays sorted by query then code."""
    if not 1 <= max_len <= MAX_PATH_LEN:
        raise ValueError(f"max path length must be in 1..{MAX_PATH_LEN}, got {max_len}")
    heads = np.ascontiguousarray(heads, dtype=np.int64)
    tails = np.ascontiguousarray(tails, dtype=np.int64)
    masks = np.ascontiguousarray(masks, dtype=np.int64)
    n_rel = max(graph.n_relations, 1)
    if n_rel ** MAX_PATH_LEN >= 2 ** 62:
        raise OverflowError("too many relations for 64-bit path codes")
    pair, code, count = _count_batch(graph.indptr, graph.inc_edge, graph.inc_other, graph.relations,
                                     heads, tails, masks, max_len, n_rel, _code_offsets(n_rel))
    order = np.lexsort((code, pair))
    return pair[order], code[order], count[order]


# ---------------------------------------------------------------- path sets and vocabulary

@dataclass
class PathSets:
    """Relational paths of a list of queries in CSR form.

    ``codes[offsets[i]:offsets[i+1]]`` are the distinct paths of query ``i`` and
    ``counts`` their multiplicities.
    """
    n_relations: int
    max_len: int
    offsets: np.ndarray
    codes: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.offsets) - 1

    def paths_of(self, i: int) -> list[tuple[tuple[int, ...], int]]:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return [(decode_path(c, self.n_relations), int(n)) for c, n in zip(self.codes[lo:hi], self.counts[lo:hi])]

    def distinct_codes(self) -> np.ndarray:
        return np.unique(self.codes)


def compute_path_sets(graph: KnowledgeGraph, heads, tails, masks, max_len: int) -> PathSets:
    pair, code, count = count_paths(graph, heads, tails, masks, max_len)
    offsets = np.zeros(len(heads) + 1, dtype=np.int64)
    np.cumsum(np.bincount(pair, minlength=len(heads)), out=offsets[1:])
    return PathSets(graph.n_relations, max_len, offsets, code, count)


class PathVocabulary:
    """Dense ids for relational paths seen in training; one extra id for unseen paths."""

    def __init__(self, paths, n_relations: int):
        self.n_relations = n_relations
        self.paths = sorted({tuple(int(r) for r in p) for p in paths}, key=lambda p: (len(p), p))
        self.index = {p: i for i, p in enumerate(self.paths)}
        self._codes = np.array([encode_path(p, n_relations) for p in self.paths], dtype=np.int64)
        self._code_order = np.argsort(self._codes)

    @property
    def oov_id(self) -> int:
        return len(self.paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, path) -> int:
        return self.index.get(tuple(path), self.oov_id)

    def ids_for_codes(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if len(self._codes) == 0:
            return np.full(len(codes), self.oov_id, dtype=np.int64)
        sorted_codes = self._codes[self._code_order]
        pos = np.clip(np.searchsorted(sorted_codes, codes), 0, len(sorted_codes) - 1)
        hit = sorted_codes[pos] == codes
        return np.where(hit, self._code_order[pos], self.oov_id)

    @classmethod
    def from_path_sets(cls, sets: PathSets) -> "PathVocabulary":
        return cls([decode_path(c, sets.n_relations) for c in sets.distinct_codes()], sets.n_relations)


def edge_ids_for(graph: KnowledgeGraph, triples) -> np.ndarray:
    """Edge id of each triple in ``graph``, or -1 when absent."""
    arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    lookup = {tuple(row): i for i, row in enumerate(graph.as_array().tolist())}
    return np.array([lookup.get(tuple(row), -1) for row in arr.tolist()], dtype=np.int64)


def build_vocabulary(graph: KnowledgeGraph, training_triples, max_len: int) -> PathVocabulary:
    """Vocabulary over all training pairs, each with its own edge masked."""
    arr = np.asarray(training_triples, dtype=np.int64).reshape(-1, 3)
    sets = compute_path_sets(graph, arr[:, 0], arr[:, 2], edge_ids_for(graph, arr), max_len)
    return PathVocabulary.from_path_sets(sets)


# ---------------------------------------------------------------- on-disk cache

_MAGIC = b"RMPC"
_VERSION = 1
_HEADER = struct.Struct("<4sIII32sQQ")  # magic, version, max_len, n_relations, key digest, n_queries, n_entries


def cache_key(graph: KnowledgeGraph, heads, tails, masks, max_len: int) -> bytes:
    h = hashlib.sha256()
    h.update(graph.fingerprint().encode())
    for a in (heads, tails, masks):
        h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
    h.update(struct.pack("<I", max_len))
    return h.digest()


def write_path_cache(path, sets: PathSets, key: bytes) -> None:
    n_q = len(sets)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, sets.max_len, sets.n_relations, key, n_q, len(sets.codes)))
        f.write(np.diff(sets.offsets).astype("<u4").tobytes())
        seqs = np.full((len(sets.codes), sets.max_len), -1, dtype="<i4")
        lens = np.zeros(len(sets.codes), dtype="u1")
        for i, c in enumerate(sets.codes.tolist()):
            p = decode_path(c, sets.n_relations)
            lens[i] = len(p)
            seqs[i, :len(p)] = p
        f.write(lens.tobytes())
        f.write(seqs.tobytes())
        f.write(sets.counts.astype("<u8").tobytes())


def read_path_cache(path, key: bytes | None = None) -> PathSets:
    data = Path(path).read_bytes()
    magic, version, max_len, n_rel, digest, n_q, n_e = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a path cache file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    if key is not None and digest != key:
        raise ValueError(f"{path}: cache was built for different data")
    pos = _HEADER.size
    sizes = np.frombuffer(data, "<u4", n_q, pos).astype(np.int64)
    pos += 4 * n_q
    lens = np.frombuffer(data, "u1", n_e, pos)
    pos += n_e
    seqs = np.frombuffer(data, "<i4", n_e * max_len, pos).reshape(n_e, max_len)
    pos += 4 * n_e * max_len
    counts = np.frombuffer(data, "<u8", n_e, pos).astype(np.int64)
    codes = np.array([encode_path(seqs[i, :lens[i]], n_rel) for i in range(n_e)], dtype=np.int64)
    offsets = np.zeros(n_q + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    return PathSets(n_rel, max_len, offsets, codes, counts)


def cached_path_sets(graph: KnowledgeGraph, heads, tails, masks, max_len: int, cache_dir=None) -> PathSets:
    if cache_dir is None:
        return compute_path_sets(graph, heads, tails, masks, max_len)
    key = cache_key(graph, heads, tails, masks, max_len)
    d = Path(cache_dir)
    d.mkdir(parents=True, exist_ok=True)
    f = d / f"paths_L{max_len}_{key.hex()[:20]}.bin"
    if f.exists():
        try:
            return read_path_cache(f, key)
        except ValueError as exc:
            log.warning("ignoring unusable path cache: %s", exc)
    sets = compute_path_sets(graph, heads, tails, masks, max_len)
    write_path_cache(f, sets, key)
    return sets


# ---------------------------------------------------------------- representations

def init_path_params(store, kind: str, n_relations: int, vocab_size: int, hidden: int, rng) -> None:
    dt = store.dtype
    if kind == "embedding":
        limit = np.sqrt(6.0 / (vocab_size + 1 + n_relations))
        table = rng.uniform(-limit, limit, size=(vocab_size + 1, n_relations)).astype(dt)
        table[vocab_size] = 0.0
        store.add("path.emb", table)
    elif kind == "rnn":
        def xav(a, b):
            lim = np.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b)).astype(dt)
        store.add("rnn.rel_emb", xav(n_relations, hidden))
        store.add("rnn.Wx", xav(hidden, hidden))
        store.add("rnn.Wh", xav(hidden, hidden))
        store.add("rnn.b", np.zeros(hidden, dtype=dt), regularize=False)
        store.add("rnn.Wo", xav(hidden, n_relations))
        store.add("rnn.bo", np.zeros(n_relations, dtype=dt), regularize=False)
    else:
        raise ValueError(f"unknown path representation {kind!r}")


def _rnn_numpy(params, seq):
    h = np.zeros(params["rnn.Wh"].shape[0], dtype=params["rnn.Wh"].dtype)
    for r in seq:
        h = np.tanh(params["rnn.rel_emb"][r] @ params["rnn.Wx"] + h @ params["rnn.Wh"] + params["rnn.b"])
    return h @ params["rnn.Wo"] + params["rnn.bo"]


def path_representation(paths, params, kind: str, vocab: PathVocabulary | None = None) -> np.ndarray:
    """Per-path score vectors (one row of width |R| per path).

    For ``embedding`` the items are vocabulary ids (the out-of-vocabulary id is
    allowed); for ``rnn`` they are relation-id sequences.
    """
    if kind == "embedding":
        table = params["path.emb"]
        ids = np.asarray(paths, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= len(table)):
            raise IndexError("unknown path id")
        return table[ids]
    if kind == "rnn":
        return np.array([_rnn_numpy(params, seq) for seq in paths]).reshape(len(paths), -1)
    raise ValueError(f"unknown path representation {kind!r}")


def aggregate_paths(path_vectors, context=None, kind: str = "attention", counts=None):
    """Combine path vectors into one |R| vector; returns ``(aggregate, weights)``.

    ``counts`` gives each row's multiplicity (default 1). With no paths the
    aggregate is zero and the weights are empty.
    """
    S = np.asarray(path_vectors, dtype=float)
    n = len(S)
    c = np.ones(n) if counts is None else np.asarray(counts, dtype=float)
    if n == 0:
        width = 0 if context is None else len(context)
        return np.zeros(width), np.zeros(0)
    if kind == "attention":
        if context is None:
            raise ValueError("attention aggregation needs a context vector")
        logits = S @ np.asarray(context) + np.log(c)
        w = np.exp(logits - logits.max())
        w /= w.sum()
    elif kind == "mean":
        w = c / c.sum()
    else:
        raise ValueError(f"unknown path aggregator {kind!r}")
    return w @ S, w


class PathEncoder:
    """Batched path-branch scores on the gradient tape."""

    def __init__(self, kind: str, aggregator: str, vocab: PathVocabulary | None):
        if kind not in PATH_KINDS:
            raise ValueError(f"unknown path representation {kind!r}")
        if aggregator not in PATH_AGGREGATORS:
            raise ValueError(f"unknown path aggregator {aggregator!r}")
        if kind == "embedding" and vocab is None:
            raise ValueError("embedding paths need a vocabulary")
        self.kind = kind
        self.aggregator = aggregator
        self.vocab = vocab

    def _rnn(self, P, codes, n_rel):
        seqs = [decode_path(c, n_rel) for c in codes.tolist()]
        width = max(len(s) for s in seqs)
        hidden = P["rnn.Wh"].shape[0]
        dtype = P["rnn.Wh"].data.dtype
        h = ad.Tensor(np.zeros((len(seqs), hidden), dtype=dtype))
        for step in range(width):
            active = np.array([len(s) > step for s in seqs])
            rels = np.array([s[step] if len(s) > step else 0 for s in seqs], dtype=np.int64)
            cand = ad.tanh(ad.gather(P["rnn.rel_emb"], rels) @ P["rnn.Wx"] + h @ P["rnn.Wh"] + P["rnn.b"])
            if active.all():
                h = cand
            else:
                h = h + ad.mul(cand - h, active[:, None].astype(dtype))
        return h @ P["rnn.Wo"] + P["rnn.bo"]

    def forward(self, P, sets: PathSets, rows, context=None, n_relations: int | None = None):
        """Aggregated path scores for queries ``rows`` of ``sets`` (batch x |R|)."""
        rows = np.asarray(rows, dtype=np.int64)
        n_rel = sets.n_relations if n_relations is None else n_relations
        B = len(rows)
        starts, ends = sets.offsets[rows], sets.offsets[rows + 1]
        sizes = ends - starts
        seg = np.repeat(np.arange(B), sizes)
        flat = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)]) if B else np.zeros(0, np.int64)
        flat = flat.astype(np.int64)
        ref = P["path.emb"] if self.kind == "embedding" else P["rnn.Wo"]
        dtype = ref.data.dtype
        if len(flat) == 0:
            return ad.Tensor(np.zeros((B, n_rel), dtype=dtype))
        codes = sets.codes[flat]
        counts = sets.counts[flat].astype(dtype)
        if self.kind == "embedding":
            S = ad.gather(P["path.emb"], self.vocab.ids_for_codes(codes))
        else:
            uniq, inv = np.unique(codes, return_inverse=True)
            S = ad.gather(self._rnn(P, uniq, n_rel), inv)
        if self.aggregator == "attention":
            if context is None:
                raise ValueError("attention aggregation needs the context branch")
            logits = ad.row_dot(S, ad.gather(context, seg)) + np.log(counts)
            w = ad.segment_softmax(logits, seg, B)
            weighted = ad.mul(S, ad.reshape(w, (-1, 1)))
        else:
            totals = np.bincount(seg, weights=counts, minlength=B)
            weighted = ad.mul(S, (counts / totals[seg])[:, None])
        return ad.segment_sum(weighted, seg, B)

    def attention_weights(self, P, sets: PathSets, row: int, context):
        """Attention weight per distinct path of one query (for explanations)."""
        ctx = ad.Tensor(np.asarray(context)[None, :])
        lo, hi = sets.offsets[row], sets.offsets[row + 1]
        if hi == lo:
            return []
        codes = sets.codes[lo:hi]
        if self.kind == "embedding":
            S = P["path.emb"].data[self.vocab.ids_for_codes(codes)]
        else:
            S = self._rnn(P, codes, sets.n_relations).data
        _, w = aggregate_paths(S, ctx.data[0], self.aggregator, sets.counts[lo:hi])
        return [(decode_path(c, sets.n_relations), float(x)) for c, x in zip(codes, w)]
