"""The <|doc_mask|> placeholder and teacher/student sequence construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .lm import AnswerSpan, LmModel, embedding_matrix
from .tokenizer import Tokenizer

MASK_MODES = ("stats", "random_002", "trainable", "none")


class SequenceOverflow(ValueError):
    pass


def compute_stats(E: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-dimension mean and population standard deviation over rows of E."""
    if E.dim() != 2 or E.shape[0] == 0:
        raise ValueError("empty embedding matrix")
    if E.shape[0] < 2:
        raise ValueError("need at least two rows")
    E = E.to(torch.float64)
    mu = E.mean(dim=0)
    sigma = ((E - mu) ** 2).mean(dim=0).sqrt()
    return mu, sigma


@dataclass
class MaskEmbedding:
    mu: torch.Tensor
    sigma: torch.Tensor
    e_mask: torch.Tensor
    init_mode: str
    seed: int


def init_mask_embedding(stats: tuple[torch.Tensor, torch.Tensor] | None, mode: str, seed: int,
                        dim: int | None = None) -> MaskEmbedding:
    """Draw the placeholder embedding once.

    stats       mu + eps, eps ~ N(0, diag(sigma^2))
    random_002  N(0, 0.02^2 I)
    trainable   random_002 draw, left trainable by the caller
    none        zeros (no placeholder is ever inserted)
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    g = torch.Generator().manual_seed(seed)
    if stats is not None:
        mu, sigma = (s.to(torch.float64) for s in stats)
        dim = mu.numel()
    else:
        if dim is None:
            raise ValueError("dim required without stats")
        mu = torch.zeros(dim, dtype=torch.float64)
        sigma = torch.zeros(dim, dtype=torch.float64)
    if mode == "stats":
        if stats is None:
            raise ValueError("stats mode needs embedding statistics")
        e = mu + sigma * torch.randn(dim, generator=g, dtype=torch.float64)
    elif mode in ("random_002", "trainable"):
        e = 0.02 * torch.randn(dim, generator=g, dtype=torch.float64)
    else:
        e = torch.zeros(dim, dtype=torch.float64)
    return MaskEmbedding(mu, sigma, e, mode, seed)


def install_mask(model: LmModel, mode: str, seed: int) -> MaskEmbedding:
    """Compute stats over the vocabulary (placeholder row excluded) and set it."""
    E = embedding_matrix(model)
    if model.mask_id is not None:
        keep = torch.ones(E.shape[0], dtype=torch.bool)
        keep[model.mask_id] = False
        E = E[keep]
    me = init_mask_embedding(compute_stats(E), mode, seed)
    with torch.no_grad():
        model.mask_vec.copy_(me.e_mask.to(model.mask_vec.dtype))
    model.mask_vec.requires_grad_(mode == "trainable")
    return me


@dataclass
class SequenceBatch:
    teacher: list[int]
    student: list[int]
    span: AnswerSpan
    doc_len: int
    doc_start: int = 1
    # student positions aligned with teacher positions (differs only in "none" mode)
    student_offset: int = 0


def build_pair(docs: Sequence[str] | str, question: str, answer: str, tok: Tokenizer,
               max_len: int = 256, mode: str = "stats") -> SequenceBatch:
    """Teacher [BOS D SEP q SEP a EOA] and student with D replaced by placeholders.

    In ``none`` mode the student simply drops D. Over-long inputs lose leading
    document tokens (in both sequences); the answer is never clipped.
    """
    if isinstance(docs, str):
        docs = [docs]
    d = [t for doc in docs for t in tok.encode(doc)]
    q = tok.encode(question)
    a = tok.encode(answer)
    if not a:
        raise ValueError("empty answer")
    if not q:
        raise ValueError("empty question")
    tail = [tok.sep_id] + q + [tok.sep_id] + a + [tok.eoa_id]
    budget = max_len - 1 - len(tail)
    if budget < 0:
        raise SequenceOverflow("question and answer alone exceed max_len")
    if len(d) > budget:
        d = d[len(d) - budget:]
    teacher = [tok.bos_id] + d + tail
    if mode == "none":
        student = [tok.bos_id] + tail
        offset = len(d)
    else:
        student = [tok.bos_id] + [tok.mask_id] * len(d) + tail
        offset = 0
    start = 1 + len(d) + len(q) + 2
    span = AnswerSpan(start, start + len(a) + 1)  # answer tokens plus EOA
    return SequenceBatch(teacher, student, span, len(d), 1, offset)


def query_prompt(docs: Sequence[str], question: str, tok: Tokenizer, mask_docs: bool,
                 max_len: int = 256, keep_docs: bool = True) -> tuple[list[int], int]:
    """Inference prompt [BOS D' SEP q SEP] where D' is D, placeholders, or empty."""
    d = [t for doc in docs for t in tok.encode(doc)] if keep_docs else []
    q = tok.encode(question)
    tail = [tok.sep_id] + q + [tok.sep_id]
    budget = max_len - 1 - len(tail) - 8  # leave room for the answer
    if len(d) > budget:
        d = d[len(d) - budget:]
    if mask_docs:
        return [tok.bos_id] + [tok.mask_id] * len(d) + tail, len(d)
    return [tok.bos_id] + d + tail, len(d)
