"""Distillation objectives and the generator training loop.

Positions: a span [start, end) names the *target* tokens (answer plus the
end-of-answer marker); the logits predicting them sit at start-1 .. end-2.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .datagen import TrainingTriple
from .generator import DocEncoder, GeneratorNet
from .lm import AnswerSpan, ForwardTrace, LmModel, pad_batch
from .mask import SequenceBatch, build_pair
from .numerics import AdamW, Divergence, LrSchedule, clip_grad_norm
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    lambda_cos: float = 0.5
    lambda_kl: float = 0.1
    batch_size: int = 4
    epochs: int = 1
    base_lr: float = 1e-4
    end_lr: float = 1e-6
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    seed: int = 0
    cos_positions: str = "all"   # all | answer-only
    mask_mode: str = "stats"
    max_len: int = 256
    checkpoint_every: int = 0
    max_bad_steps: int = 20

    def __post_init__(self):
        if self.lambda_cos < 0 or self.lambda_kl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cos_positions not in ("all", "answer-only"):
            raise ValueError(f"unknown cos position policy {self.cos_positions!r}")


@dataclass
class LossBreakdown:
    gen: torch.Tensor
    cos: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor
    per_layer_cos: torch.Tensor

    def to_record(self) -> dict:
        d = {k: float(getattr(self, k).detach()) for k in ("gen", "cos", "kl", "total")}
        return {"L_gen": d["gen"], "L_cos": d["cos"], "L_kl": d["kl"], "total": d["total"],
                "per_layer_cos": [float(x) for x in self.per_layer_cos.detach()]}


def layer_weights(n_layers: int) -> torch.Tensor:
    """Weight of layer i (1-based) is i / sum_j j."""
    w = torch.arange(1, n_layers + 1, dtype=torch.float64)
    return w / w.sum()


def _span_rows(span: AnswerSpan) -> torch.Tensor:
    return torch.arange(span.start - 1, span.end - 1)


def gen_loss(logits: torch.Tensor, tokens: torch.Tensor, span: AnswerSpan) -> torch.Tensor:
    """Mean negative log-likelihood of the target tokens in ``span``."""
    if span.end <= span.start:
        raise ValueError("empty answer span")
    rows = _span_rows(span)
    logp = F.log_softmax(logits[rows], dim=-1)
    tgt = tokens[span.start:span.end]
    return -logp.gather(-1, tgt[:, None]).mean()


def cos_align_loss(teacher_hidden: Sequence[torch.Tensor], student_hidden: Sequence[torch.Tensor],
                   teacher_pos: torch.Tensor | None = None, student_pos: torch.Tensor | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-layer 1 - mean cosine, and their layer-weighted average.

    Hidden states are (T, h) per layer; positions select the aligned rows
    (default: all rows, which requires equal lengths). Teacher states are detached.
    """
    if len(teacher_hidden) != len(student_hidden):
        raise ValueError("layer count mismatch")
    if teacher_pos is None:
        if teacher_hidden[0].shape[0] != student_hidden[0].shape[0]:
            raise ValueError("teacher and student sequence lengths differ")
        teacher_pos = student_pos = torch.arange(teacher_hidden[0].shape[0])
    per_layer = torch.stack([
        1.0 - F.cosine_similarity(ht.detach()[teacher_pos], hs[student_pos], dim=-1, eps=1e-8).mean()
        for ht, hs in zip(teacher_hidden, student_hidden)
    ])
    w = layer_weights(len(per_layer)).to(per_layer.dtype)
    return per_layer, (w * per_layer).sum()


def kl_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, span: AnswerSpan,
            student_span: AnswerSpan | None = None) -> torch.Tensor:
    """Mean over answer positions of KL(softmax(z_t) || softmax(z_s)); teacher detached."""
    if span.end <= span.start:
        raise ValueError("empty answer span")
    if teacher_logits.shape[-1] != student_logits.shape[-1]:
        raise ValueError("vocabulary sizes differ")
    zt = teacher_logits.detach()[_span_rows(span)]
    zs = student_logits[_span_rows(student_span or span)]
    logp = F.log_softmax(zt, dim=-1)
    logq = F.log_softmax(zs, dim=-1)
    return (logp.exp() * (logp - logq)).sum(-1).mean()


def combine(gen: torch.Tensor, cos: torch.Tensor, kl: torch.Tensor, per_layer: torch.Tensor,
            cfg: DistillConfig) -> LossBreakdown:
    # summed in float64 so the logged total matches its parts exactly
    total = gen.double() + cfg.lambda_cos * cos.double() + cfg.lambda_kl * kl.double()
    return LossBreakdown(gen, cos, kl, total, per_layer)


# ---------------------------------------------------------------- batching

@dataclass
class PreparedBatch:
    pairs: list[SequenceBatch]
    teacher: torch.Tensor
    student: torch.Tensor
    student_valid: torch.Tensor
    docs: torch.Tensor
    docs_valid: torch.Tensor


def prepare(triples: Sequence[TrainingTriple], tok: Tokenizer, cfg: DistillConfig) -> PreparedBatch:
    pairs = [build_pair(t.docs, t.question, t.answer, tok, cfg.max_len, cfg.mask_mode) for t in triples]
    teacher, _ = pad_batch([p.teacher for p in pairs], tok.pad_id)
    student, svalid = pad_batch([p.student for p in pairs], tok.pad_id)
    docs, dvalid = pad_batch([p.teacher[p.doc_start:p.doc_start + p.doc_len] or [tok.pad_id] for p in pairs],
                             tok.pad_id)
    for i, p in enumerate(pairs):
        if p.doc_len == 0:
            dvalid[i, 0] = True  # attend to a lone pad rather than nothing
    return PreparedBatch(pairs, teacher, student, svalid, docs, dvalid)


def batch_losses(lm: LmModel, enc: DocEncoder, gen: GeneratorNet, batch: PreparedBatch,
                 cfg: DistillConfig) -> LossBreakdown:
    """Teacher forward (no grad), generate deltas, student forward, combine."""
    with torch.no_grad():
        t_trace = lm(batch.teacher)
        E_D = enc(batch.docs, batch.docs_valid)
    delta = gen(E_D.to(gen.queries.dtype), batch.docs_valid)
    s_trace = lm(batch.student, delta)
    gens, coss, kls, layers = [], [], [], []
    for i, p in enumerate(batch.pairs):
        s_span = AnswerSpan(p.span.start - p.student_offset, p.span.end - p.student_offset)
        gens.append(gen_loss(s_trace.logits[i], batch.student[i], s_span))
        if cfg.cos_positions == "answer-only":
            sp = _span_rows(s_span)
        else:
            sp = torch.arange(len(p.student))
        # with the document dropped ("none" mode) student rows after BOS map past it
        tp = torch.where(sp >= p.doc_start, sp + p.student_offset, sp)
        per_layer, cos = cos_align_loss([h[i] for h in t_trace.hidden_states],
                                        [h[i] for h in s_trace.hidden_states], tp, sp)
        coss.append(cos)
        layers.append(per_layer)
        kls.append(kl_loss(t_trace.logits[i], s_trace.logits[i], p.span, s_span))
    return combine(torch.stack(gens).mean(), torch.stack(coss).mean(), torch.stack(kls).mean(),
                   torch.stack(layers).mean(0), cfg)


def trainable_parameters(gen: GeneratorNet, lm: LmModel, cfg: DistillConfig) -> list[torch.nn.Parameter]:
    params = [p for p in gen.parameters() if p.requires_grad]
    if cfg.mask_mode == "trainable":
        params.append(lm.mask_vec)
    return params


def train_step(lm: LmModel, enc: DocEncoder, gen: GeneratorNet, triples: Sequence[TrainingTriple],
               tok: Tokenizer, cfg: DistillConfig, opt: AdamW) -> LossBreakdown:
    """One optimizer step on the generator (and the placeholder in trainable mode)."""
    if not triples:
        raise ValueError("empty batch")
    batch = prepare(triples, tok, cfg)
    losses = batch_losses(lm, enc, gen, batch, cfg)
    opt.zero_grad()
    if not torch.isfinite(losses.total):
        raise Divergence(f"non-finite loss {float(losses.total)}")
    losses.total.backward()
    if cfg.max_grad_norm:
        clip_grad_norm(opt.params, cfg.max_grad_norm)
    opt.step()
    return losses


@dataclass
class TrainResult:
    gen: GeneratorNet
    log: list[dict] = field(default_factory=list)
    rejected_steps: int = 0


def train_generator(dataset: Sequence[TrainingTriple], lm: LmModel, enc: DocEncoder, gen: GeneratorNet,
                    tok: Tokenizer, cfg: DistillConfig, log_path: str | Path | None = None,
                    ckpt_dir: str | Path | None = None,
                    on_step: Callable[[int, dict], None] | None = None,
                    record_extra: dict | None = None) -> TrainResult:
    """Epoch(s) over the shuffled dataset with warm-up + polynomial decay."""
    if not dataset:
        raise ValueError("empty dataset")
    lm.requires_grad_(False)
    enc.requires_grad_(False)
    lm.mask_vec.requires_grad_(cfg.mask_mode == "trainable")
    gen.train()
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    sched = LrSchedule(total, cfg.base_lr, cfg.end_lr, cfg.warmup_fraction)
    opt = AdamW(trainable_parameters(gen, lm, cfg), sched, weight_decay=cfg.weight_decay)
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    result = TrainResult(gen)
    fh = open(log_path, "w") if log_path else None
    bad = 0
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = list(range(len(dataset)))
            rng.shuffle(order)
            for b in range(steps_per_epoch):
                triples = [dataset[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                lr = opt.current_lr()
                try:
                    losses = train_step(lm, enc, gen, triples, tok, cfg, opt)
                except Divergence as exc:
                    bad += 1
                    result.rejected_steps += 1
                    log.warning("step %d rejected: %s", step, exc)
                    opt.state.step += 1
                    if bad > cfg.max_bad_steps:
                        raise
                    step += 1
                    continue
                bad = 0
                rec = {"step": step, "epoch": epoch, **losses.to_record(), "lr": lr, **(record_extra or {})}
                result.log.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(step, rec)
                step += 1
                if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    gen.save(Path(ckpt_dir) / f"generator_step{step}.safetensors")
    finally:
        if fh:
            fh.close()
    gen.eval()
    lm.mask_vec.requires_grad_(False)
    return result
