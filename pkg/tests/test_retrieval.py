import math
import random

import pytest

from dprag import datagen as dg
from dprag.retrieval import (
    MinHasher, build_index, exact_jaccard, max_jaccard_overlap, shingles, sketch_jaccard, top_k,
)

DOCS = [
    ("d1", "the cat sat on the mat"),
    ("d2", "the dog sat on the log"),
    ("d3", "cats and dogs are pets"),
    ("d4", "a bird sang on the wire at dawn"),
    ("d5", "the mat was red"),
]


def bm25_oracle(docs, query, k1=1.2, b=0.75):
    toks = {i: t.split() for i, t in docs}
    N = len(toks)
    avg = sum(map(len, toks.values())) / N
    out = {}
    for i, d in toks.items():
        s = 0.0
        for q in query.split():
            df = sum(q in t for t in toks.values())
            if df == 0:
                continue
            idf = math.log((N - df + 0.5) / (df + 0.5) + 1)
            tf = d.count(q)
            s += idf * tf / (tf + k1 * (1 - b + b * len(d) / avg))
        if s > 0:
            out[i] = s
    return out


@pytest.mark.parametrize("query", ["the mat", "sat on the log", "pets", "red cat mat"])
def test_bm25_matches_formula(query):
    idx = build_index(DOCS)
    oracle = bm25_oracle(DOCS, query)
    got = dict(top_k(idx, query, k=5))
    assert got.keys() == dict(sorted(oracle.items(), key=lambda x: (-x[1], x[0]))[:5]).keys()
    for d, s in got.items():
        assert abs(s - oracle[d]) <= 1e-10


def test_bm25_single_doc_exact_match_first():
    idx = build_index(DOCS)
    assert top_k(idx, "bird sang wire dawn", 1)[0][0] == "d4"


def test_bm25_ties_by_doc_id():
    idx = build_index([("b", "x y"), ("a", "x y"), ("c", "z")])
    assert [d for d, _ in top_k(idx, "x", 3)] == ["a", "b"]


def test_bm25_errors():
    with pytest.raises(ValueError):
        build_index([])
    with pytest.raises(ValueError):
        build_index([("a", "x"), ("a", "y")])
    assert top_k(build_index(DOCS), "   ") == []


def test_minhash_identical_sets():
    h = MinHasher(64)
    s = shingles("alpha beta gamma")
    assert sketch_jaccard(h.sketch(s), h.sketch(set(s))) == 1.0


def _corpus50(seed=0):
    rng = random.Random(seed)
    words = [f"w{i}" for i in range(120)]
    return [" ".join(rng.sample(words, rng.randint(8, 40))) for _ in range(50)]


def test_minhash_within_tolerance_of_exact():
    docs = _corpus50()
    h = MinHasher(512, seed=1)
    sk = [h.sketch(shingles(d)) for d in docs]
    worst = 0.0
    for i in range(50):
        for j in range(i + 1, 50):
            est = sketch_jaccard(sk[i], sk[j])
            worst = max(worst, abs(est - exact_jaccard(shingles(docs[i]), shingles(docs[j]))))
    assert worst <= 0.08


def test_more_permutations_reduce_error():
    docs = _corpus50(1)
    pairs = [(i, j) for i in range(50) for j in range(i + 1, 50)]

    def mean_err(n):
        h = MinHasher(n, seed=2)
        sk = [h.sketch(shingles(d)) for d in docs]
        return sum(abs(sketch_jaccard(sk[i], sk[j]) - exact_jaccard(shingles(docs[i]), shingles(docs[j])))
                   for i, j in pairs) / len(pairs)

    assert mean_err(512) < mean_err(64)


def test_overlap_self_is_one_and_disjoint_is_zero():
    docs = [(f"t{i}", d) for i, d in enumerate(_corpus50()[:10])]
    rep = max_jaccard_overlap(docs, docs, seed=0)
    assert rep.mean_max_jaccard_pct == pytest.approx(100.0)
    other = [(f"o{i}", " ".join(f"z{i}_{k}" for k in range(10))) for i in range(10)]
    assert max_jaccard_overlap(other, docs, seed=0).mean_max_jaccard_pct == 0.0


def test_overlap_on_fact_world(world):
    test = dg.corpus(world, ["eval-in-domain"])
    train = dg.corpus(world, ["distill-train"])
    rep = max_jaccard_overlap(test, train, seed=0, dataset="eval-in-domain")
    assert 0 < rep.mean_max_jaccard_pct < 100
    assert len(rep.per_doc) == len(test)
    assert rep.to_json()["dataset"] == "eval-in-domain"
