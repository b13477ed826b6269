"""Inference for the four paradigms, token F1 and evaluation sweeps."""
from __future__ import annotations

import json
import logging
import re
import string
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import lora
from .datagen import TrainingTriple, parse_facts
from .generator import DocEncoder, GeneratorNet
from .lm import LmExample, LmModel, greedy_decode, lm_loss
from .lora import LoraDelta, fuse_average, fuse_concat_rank
from .mask import query_prompt
from .numerics import AdamW
from .retrieval import Bm25Index, top_k
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

METHODS = ("standard", "prag", "dyprag", "distilled")


def _f1_tokens(text: str) -> list[str]:
    text = text.lower()
    text = "".join(ch if ch not in string.punctuation else " " for ch in text)
    return text.split()


def token_f1(prediction: str, gold: str) -> float:
    p, g = _f1_tokens(prediction), _f1_tokens(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    prec, rec = overlap / len(p), overlap / len(g)
    return 2 * prec * rec / (prec + rec)


@dataclass
class Answer:
    text: str
    input_ids: list[int]
    doc_ids: list[str]
    extra_seconds: float = 0.0  # offline adapter fitting triggered by this query (PRAG)


@dataclass
class Pipeline:
    tok: Tokenizer
    lm: LmModel
    index: Bm25Index
    enc: DocEncoder | None = None
    gen: GeneratorNet | None = None
    prag_adapters: dict[str, LoraDelta] = field(default_factory=dict)
    k: int = 3
    max_new_tokens: int = 6
    prag_steps: int = 40
    prag_lr: float = 5e-3
    config_hash: str = ""
    mask_mode: str = "stats"  # "none" drops the placeholders, matching that ablation's training

    def retrieve(self, query: str, k: int | None = None) -> list[tuple[str, str]]:
        k = self.k if k is None else k
        if k <= 0:
            return []
        hits = top_k(self.index, query, k)
        if not hits:
            log.warning("empty retrieval for %r; answering from the query alone", query)
        return [(d, self.index.texts[d]) for d, _ in hits]

    def decode(self, prompt: list[int], adapter: LoraDelta | None) -> str:
        out = greedy_decode(self.lm, prompt, adapter, self.max_new_tokens, self.tok.eoa_id)
        return self.tok.decode(out)

    def doc_delta(self, doc_tokens: list[int]) -> LoraDelta:
        assert self.enc is not None and self.gen is not None
        with torch.no_grad():
            E = self.enc(torch.tensor(doc_tokens or [self.tok.pad_id]))
            return self.gen(E.to(self.gen.queries.dtype)).detach()


def infer_standard_rag(pipe: Pipeline, query: str, k: int | None = None) -> Answer:
    docs = pipe.retrieve(query, k)
    prompt, _ = query_prompt([t for _, t in docs], query, pipe.tok, mask_docs=False, max_len=pipe.lm.cfg.max_len)
    return Answer(pipe.decode(prompt, None), prompt, [d for d, _ in docs])


def infer_distilled(pipe: Pipeline, query: str, k: int | None = None) -> Answer:
    docs = pipe.retrieve(query, k)
    texts = [t for _, t in docs]
    prompt, n_doc = query_prompt(texts, query, pipe.tok, mask_docs=True, max_len=pipe.lm.cfg.max_len)
    if not docs:
        return Answer(pipe.decode(prompt, None), prompt, [])
    d_inf = [t for text in texts for t in pipe.tok.encode(text)]
    d_inf = d_inf[len(d_inf) - n_doc:]  # same truncation as the placeholder run
    delta = pipe.doc_delta(d_inf)
    if pipe.mask_mode == "none":
        prompt, _ = query_prompt([], query, pipe.tok, mask_docs=False, max_len=pipe.lm.cfg.max_len)
    return Answer(pipe.decode(prompt, delta), prompt, [d for d, _ in docs])


def infer_dyprag_style(pipe: Pipeline, query: str, k: int | None = None) -> Answer:
    docs = pipe.retrieve(query, k)
    prompt, _ = query_prompt([], query, pipe.tok, mask_docs=False, max_len=pipe.lm.cfg.max_len)
    if not docs:
        return Answer(pipe.decode(prompt, None), prompt, [])
    deltas = [pipe.doc_delta(pipe.tok.encode(text)) for _, text in docs]
    return Answer(pipe.decode(prompt, fuse_average(deltas)), prompt, [d for d, _ in docs])


def infer_prag_style(pipe: Pipeline, query: str, k: int | None = None,
                     qa_for_doc: Callable[[str, str], list[tuple[str, str]]] | None = None) -> Answer:
    docs = pipe.retrieve(query, k)
    prompt, _ = query_prompt([], query, pipe.tok, mask_docs=False, max_len=pipe.lm.cfg.max_len)
    if not docs:
        return Answer(pipe.decode(prompt, None), prompt, [])
    extra = 0.0
    deltas = []
    for doc_id, text in docs:
        if doc_id not in pipe.prag_adapters:
            t0 = time.perf_counter()
            qa = qa_for_doc(doc_id, text) if qa_for_doc else []
            pipe.prag_adapters[doc_id] = fit_doc_adapter(pipe.lm, pipe.tok, text, qa, pipe.prag_steps,
                                                         pipe.prag_lr, seed=int(re.sub(r"\D", "", doc_id) or 0))
            extra += time.perf_counter() - t0
            log.info("fitted missing adapter for %s in %.2fs", doc_id, time.perf_counter() - t0)
        deltas.append(pipe.prag_adapters[doc_id])
    return Answer(pipe.decode(prompt, fuse_concat_rank(deltas)), prompt, [d for d, _ in docs], extra)


def fit_doc_adapter(lm: LmModel, tok: Tokenizer, doc: str, qa: Sequence[tuple[str, str]], steps: int = 40,
                    lr: float = 5e-3, rank: int = 2, alpha: float = 32.0, seed: int = 0) -> LoraDelta:
    """Offline per-document LoRA: next-token loss on the document plus its
    synthetic QA pairs asked without context."""
    shape = lm.cfg.lora_shape(rank, alpha)
    g = torch.Generator().manual_seed(seed)
    A = {k: (torch.randn(v.shape, generator=g) / shape.d_model**0.5).requires_grad_() for k, v in
         lora.zeros(shape).A.items()}
    B = {k: v.clone().requires_grad_() for k, v in lora.zeros(shape).B.items()}
    delta = LoraDelta(A, B, rank, alpha)
    examples = [LmExample([tok.bos_id] + tok.encode(doc) + [tok.eoa_id])]
    for q, a in qa:
        prompt, _ = query_prompt([], q, tok, mask_docs=False)
        ans = tok.encode(a) + [tok.eoa_id]
        examples.append(LmExample(prompt + ans, [0.0] * len(prompt) + [1.0] * len(ans)))
    opt = AdamW(list(A.values()) + list(B.values()), lr=lr, weight_decay=0.0)
    with torch.enable_grad():
        for _ in range(steps):
            loss = lm_loss(lm, examples, tok.pad_id, delta)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return delta.detach()


def doc_token_leak(answer: Answer, doc_texts: Sequence[str], query: str, tok: Tokenizer) -> int:
    """Count input tokens that occur in the retrieved documents but not in the query."""
    q = set(tok.encode(query)) | tok.special_ids
    doc_only = {t for text in doc_texts for t in tok.encode(text)} - q
    return sum(1 for t in answer.input_ids if t in doc_only)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalRecord:
    question: str
    gold: str
    prediction: str
    f1: float
    latency: float
    kind: str = ""
    error: str = ""


@dataclass
class EvalReport:
    method: str
    records: list[EvalRecord]
    f1: float
    mean_latency: float
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    def without_latency(self) -> dict:
        d = self.to_json()
        d.pop("mean_latency")
        for r in d["records"]:
            r.pop("latency")
        return d

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["records"] = [EvalRecord(**r) for r in d["records"]]
        return cls(**d)


INFER: dict[str, Callable[..., Answer]] = {
    "standard": infer_standard_rag,
    "prag": infer_prag_style,
    "dyprag": infer_dyprag_style,
    "distilled": infer_distilled,
}


def evaluate(method: str, pipe: Pipeline, eval_set: Sequence[TrainingTriple], seed: int = 0,
             k: int | None = None, **kwargs) -> EvalReport:
    """Fixed-order sweep; a failing question scores 0 and is recorded, never fatal."""
    fn = INFER[method]
    records = []
    for t in eval_set:
        t0 = time.perf_counter()
        try:
            ans = fn(pipe, t.question, k, **kwargs)
            pred, err = ans.text, ""
        except Exception as exc:  # noqa: BLE001 - per-question isolation
            log.exception("question failed: %s", t.question)
            pred, err = "", f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        records.append(EvalRecord(t.question, t.answer, pred, token_f1(pred, t.answer), dt, t.kind, err))
    f1 = 100.0 * sum(r.f1 for r in records) / max(len(records), 1)
    lat = sum(r.latency for r in records) / max(len(records), 1)
    return EvalReport(method, records, f1, lat, pipe.config_hash, seed)


def qa_from_document(text: str, rng_seed: int = 0) -> list[tuple[str, str]]:
    """Offline QA synthesis for one document (PRAG's per-document training data)."""
    import random
    from .datagen import SINGLE_Q
    rng = random.Random(rng_seed)
    out = []
    for name, facts in parse_facts([text]).items():
        for rel, value in facts.items():
            out.append((rng.choice(SINGLE_Q[rel]).format(name=name), value))
    return out


def comparison_table(reports: Sequence[EvalReport]) -> tuple[str, str]:
    """Aligned text table and CSV of F1 / latency per method."""
    if len({r.config_hash for r in reports}) > 1:
        raise ValueError("refusing to compare reports from different configs")
    rows = [("method", "f1", "latency_s", "n")]
    for r in reports:
        rows.append((r.method, f"{r.f1:.1f}", f"{r.mean_latency:.4f}", str(len(r.records))))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    csv = "\n".join(",".join(row) for row in rows)
    return text, csv
