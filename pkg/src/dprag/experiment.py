"""Desk-scale experiment plumbing: the vocabulary and the LM pretraining corpora."""
from __future__ import annotations

import random
from typing import Sequence

from . import datagen as dg
from .lm import LmExample
from .retrieval import build_index, top_k
from .tokenizer import Tokenizer


def build_tokenizer(world: dg.FactWorld) -> Tokenizer:
    texts = [dg.render_document(e) for e in world.entities]
    tables = [dg.DOC_TEMPLATES, dg.SINGLE_Q, dg.SINGLE_Q_OOD]
    for table in tables:
        texts.extend(t for ts in table.values() for t in ts)
    texts.extend(t for _, t, _ in dg.CROSS_Q + dg.CROSS_Q_OOD)
    texts.extend(dg.BRIDGE_Q.values())
    texts.extend(["this person", "the a of so then", "yes no"])
    texts.extend(dg.FIRST_NAMES + dg.LAST_NAMES + dg.CITIES + dg.OCCUPATIONS + dg.COUNTRIES + dg.EMPLOYERS + dg.YEARS)
    texts = [t.replace("{", " ").replace("}", " ") for t in texts]
    return Tokenizer.from_texts(texts)


def episode(tok: Tokenizer, docs: Sequence[str], question: str, answer: str, ctx_weight: float) -> LmExample:
    d = [t for doc in docs for t in tok.encode(doc)]
    q = tok.encode(question)
    a = tok.encode(answer) + [tok.eoa_id]
    toks = [tok.bos_id] + d + [tok.sep_id] + q + [tok.sep_id] + a
    # weight i applies to predicting token i (position 0 is never a target)
    w = [0.0] + [ctx_weight] * (len(d) + 1 + len(q) + 1) + [1.0] * len(a)
    return LmExample(toks, w)


def _fresh_worlds(seed: int, chunk_entities: int):
    """Endless stream of small worlds with re-drawn facts.

    Names recur across worlds with unrelated facts, so memorizing a
    name-to-fact mapping never lowers the loss; only reading the context does.
    """
    chunk = 0
    while True:
        w = dg.gen_world(seed * 1_000_003 + chunk, chunk_entities, {"lm-pretrain": chunk_entities})
        chunk += 1
        yield w, dg.build_training_set(w, split="lm-pretrain", seed=seed + chunk)


def reading_examples(tok: Tokenizer, n_episodes: int, seed: int, qa_per_episode: int = 6,
                     ctx_weight: float = 0.1, max_len: int = 256, chunk_entities: int = 120,
                     chunk_episodes: int = 200) -> list[LmExample]:
    """Warm-up corpus: one document followed by several of its questions.

    Each question block is ``<sep> q <sep> a <eoa>`` and only answer tokens
    carry full weight.
    """
    rng = random.Random(seed)
    out: list[LmExample] = []
    for world, qa in _fresh_worlds(seed, chunk_entities):
        by_doc: dict[str, list[dg.TrainingTriple]] = {}
        for t in qa:
            if t.kind == "single":
                by_doc.setdefault(t.doc_ids[0], []).append(t)
        text = {e.doc_id: dg.render_document(e) for e in world.entities}
        ids = sorted(by_doc)
        for _ in range(min(chunk_episodes, n_episodes - len(out))):
            doc_id = ids[rng.randrange(len(ids))]
            pool = by_doc[doc_id]
            picked = rng.sample(pool, min(qa_per_episode, len(pool)))
            d = tok.encode(text[doc_id])
            toks, w = [tok.bos_id] + d, [0.0] + [ctx_weight] * len(d)
            for t in picked:
                q = [tok.sep_id] + tok.encode(t.question) + [tok.sep_id]
                a = tok.encode(t.answer) + [tok.eoa_id]
                toks += q + a
                w += [ctx_weight] * len(q) + [1.0] * len(a)
            if len(toks) <= max_len:
                out.append(LmExample(toks, w))
        if len(out) >= n_episodes:
            return out
    return out


def retrieval_examples(tok: Tokenizer, n_episodes: int, seed: int, k: int = 3, ctx_weight: float = 0.1,
                       max_len: int = 256, chunk_entities: int = 120, chunk_episodes: int = 200,
                       k1: float = 1.2, b: float = 0.75) -> list[LmExample]:
    """Standard-RAG episodes: BM25 top-k documents in rank order, then one question."""
    rng = random.Random(seed)
    out: list[LmExample] = []
    for world, qa in _fresh_worlds(seed, chunk_entities):
        index = build_index([(e.doc_id, dg.render_document(e)) for e in world.entities], k1, b)
        for _ in range(min(chunk_episodes, n_episodes - len(out))):
            t = qa[rng.randrange(len(qa))]
            docs = [index.texts[d] for d, _ in top_k(index, t.question, k)]
            ex = episode(tok, docs, t.question, t.answer, ctx_weight)
            if len(ex.tokens) <= max_len:
                out.append(ex)
        if len(out) >= n_episodes:
            return out
    return out
