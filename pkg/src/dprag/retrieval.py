"""Okapi BM25 retrieval and a MinHash/LSH train-test overlap audit."""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tokenizer import normalize

log = logging.getLogger(__name__)


@dataclass
class Bm25Index:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avg_len: float
    k1: float = 1.2
    b: float = 0.75
    texts: dict[str, str] = field(default_factory=dict)

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(corpus: Sequence[tuple[str, str]], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if not corpus:
        raise ValueError("empty corpus")
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    lengths: dict[str, int] = {}
    texts: dict[str, str] = {}
    for doc_id, text in sorted(corpus, key=lambda x: x[0]):
        if doc_id in lengths:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        toks = normalize(text)
        lengths[doc_id] = len(toks)
        texts[doc_id] = text
        for term, tf in sorted(Counter(toks).items()):
            postings[term].append((doc_id, tf))
    avg = sum(lengths.values()) / len(lengths)
    return Bm25Index(dict(postings), lengths, avg, k1, b, texts)


def top_k(index: Bm25Index, query: str, k: int = 3) -> list[tuple[str, float]]:
    """Best ``k`` (doc_id, score), ties broken by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = normalize(query)
    if not terms:
        log.warning("empty query")
        return []
    scores: dict[str, float] = defaultdict(float)
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_len[doc_id] / index.avg_len)
            scores[doc_id] += idf * tf / (tf + norm)
    ranked = sorted(scores.items(), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


# ---------------------------------------------------------------- MinHash / LSH

_MERSENNE = (1 << 61) - 1
_MAX_HASH = (1 << 32) - 1


def _token_hash(tok: str) -> int:
    # stable across processes (no PYTHONHASHSEED dependence): FNV-1a 32 bit
    h = 0x811C9DC5
    for byte in tok.encode("utf8"):
        h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
    return h


@dataclass
class MinHasher:
    n_perm: int = 512
    seed: int = 1

    def __post_init__(self):
        rng = np.random.RandomState(self.seed)
        # a, b < 2^32 and x < 2^32 keep a*x + b below 2^64
        self.a = rng.randint(1, 1 << 32, size=self.n_perm, dtype=np.uint64)
        self.b = rng.randint(0, 1 << 32, size=self.n_perm, dtype=np.uint64)

    def sketch(self, tokens: set[str]) -> np.ndarray:
        if not tokens:
            return np.full(self.n_perm, _MAX_HASH, dtype=np.uint64)
        hv = np.array([_token_hash(t) for t in sorted(tokens)], dtype=np.uint64)
        perm = (self.a[:, None] * hv[None, :] + self.b[:, None]) % np.uint64(_MERSENNE)
        return (perm & np.uint64(_MAX_HASH)).min(axis=1)


def shingles(text: str) -> set[str]:
    """Unigram token set."""
    return set(normalize(text))


def exact_jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def sketch_jaccard(s1: np.ndarray, s2: np.ndarray) -> float:
    return float(np.mean(s1 == s2))


@dataclass
class OverlapReport:
    per_doc: list[dict]
    mean_max_jaccard_pct: float
    dataset: str = ""

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "mean_max_jaccard_pct": self.mean_max_jaccard_pct, "per_doc": self.per_doc}


def max_jaccard_overlap(test_docs: Sequence[tuple[str, str]], train_docs: Sequence[tuple[str, str]],
                        n_perm: int = 512, lsh_bands: int = 64, seed: int = 1, dataset: str = "") -> OverlapReport:
    """Estimated max Jaccard of each test doc against the train docs.

    Candidates come from LSH banding; a test doc with no candidate falls back
    to a full sketch scan so every doc gets an estimate.
    """
    if n_perm % lsh_bands:
        raise ValueError("n_perm must be divisible by lsh_bands")
    rows = n_perm // lsh_bands
    mh = MinHasher(n_perm, seed)
    train_ids = [d for d, _ in train_docs]
    train_sk = np.stack([mh.sketch(shingles(t)) for _, t in train_docs]) if train_docs else np.zeros((0, n_perm))
    buckets: dict[tuple[int, bytes], list[int]] = defaultdict(list)
    for j, sk in enumerate(train_sk):
        for band in range(lsh_bands):
            buckets[(band, sk[band * rows:(band + 1) * rows].tobytes())].append(j)
    per_doc = []
    for doc_id, text in test_docs:
        sk = mh.sketch(shingles(text))
        cand: set[int] = set()
        for band in range(lsh_bands):
            cand.update(buckets.get((band, sk[band * rows:(band + 1) * rows].tobytes()), ()))
        pool = sorted(cand) if cand else range(len(train_ids))
        best, best_id = 0.0, None
        for j in pool:
            s = sketch_jaccard(sk, train_sk[j])
            if s > best or best_id is None:
                best, best_id = s, train_ids[j]
        per_doc.append({"doc_id": doc_id, "max_jaccard": best, "nearest": best_id, "n_candidates": len(cand)})
    mean = 100.0 * float(np.mean([p["max_jaccard"] for p in per_doc])) if per_doc else 0.0
    return OverlapReport(per_doc, mean, dataset)
