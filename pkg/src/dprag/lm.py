"""Tiny decoder-only transformer: the frozen base LM and standard-RAG teacher."""
from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .lora import LoraDelta, LoraShape, TARGETS
from .numerics import AdamW, LrSchedule, clip_grad_norm, Divergence

log = logging.getLogger(__name__)


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("need at least two layers")

    def lora_shape(self, rank: int = 2, alpha: float = 32.0) -> LoraShape:
        return LoraShape(self.n_layers, self.d_model, rank, alpha, TARGETS)


@dataclass
class ForwardTrace:
    logits: torch.Tensor               # (..., T, V)
    hidden_states: list[torch.Tensor]  # n_layers entries of (..., T, h)
    tokens: torch.Tensor


@dataclass
class AnswerSpan:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")


def sinusoidal(max_len: int, d: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(max_len, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


def _lora_term(x: torch.Tensor, A: torch.Tensor, B: torch.Tensor, scale: float) -> torch.Tensor:
    # x: (N, T, h); A: (r, h) or (N, r, h); B: (h, r) or (N, h, r)
    if A.dim() == 2:
        return scale * (x @ A.transpose(-1, -2)) @ B.transpose(-1, -2)
    return scale * torch.einsum("ntr,nor->nto", torch.einsum("nth,nrh->ntr", x, A), B)


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def project(self, name: str, x: torch.Tensor, layer: int, adapter: LoraDelta | None) -> torch.Tensor:
        out = getattr(self, name)(x)
        if adapter is not None and (layer, name) in adapter.A:
            out = out + _lora_term(x, adapter.A[(layer, name)], adapter.B[(layer, name)], adapter.scale)
        return out

    def forward(self, x, layer, adapter=None, causal=True, key_mask=None):
        N, T, h = x.shape
        hd = h // self.n_heads

        def heads(t):
            return t.view(N, T, self.n_heads, hd).transpose(1, 2)

        q = heads(self.project("q", x, layer, adapter))
        k = heads(self.project("k", x, layer, adapter))
        v = heads(self.project("v", x, layer, adapter))
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, is_causal=causal and mask is None)
        return self.o(y.transpose(1, 2).reshape(N, T, h))


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def forward(self, x, layer, adapter=None, causal=True, key_mask=None):
        x = x + self.attn(self.ln1(x), layer, adapter, causal, key_mask)
        return x + self.ff(self.ln2(x))


class LmModel(nn.Module):
    def __init__(self, cfg: LmConfig, mask_id: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.mask_id = mask_id
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
            self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(cfg.d_model)
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.register_buffer("pos", sinusoidal(cfg.max_len, cfg.d_model).float(), persistent=False)
        # placeholder embedding for <|doc_mask|>; set by mask.init_mask_embedding
        self.mask_vec = nn.Parameter(torch.zeros(cfg.d_model), requires_grad=False)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.tok_emb(tokens)
        if self.mask_id is not None:
            is_mask = (tokens == self.mask_id).unsqueeze(-1)
            x = torch.where(is_mask, self.mask_vec.to(x.dtype).expand_as(x), x)
        return x + self.pos[: tokens.shape[-1]].to(x.dtype)

    def forward(self, tokens: torch.Tensor, adapter: LoraDelta | None = None) -> ForwardTrace:
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_len {self.cfg.max_len}")
        if tokens.numel() and (int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0):
            raise ValueError("token id out of range")
        x = self.embed(tokens)
        hidden = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, i, adapter)
            hidden.append(x)
        logits = self.head(self.ln_f(x))
        if squeeze:
            return ForwardTrace(logits[0], [h[0] for h in hidden], tokens[0])
        return ForwardTrace(logits, hidden, tokens)

    def merged(self, adapter: LoraDelta) -> "LmModel":
        """Copy of the model with ``adapter`` folded into the weights."""
        import copy
        m = copy.deepcopy(self)
        with torch.no_grad():
            for (layer, name) in adapter.keys:
                lin = getattr(m.blocks[layer].attn, name)
                lin.weight += adapter.dense((layer, name)).to(lin.weight.dtype)
        return m

    def theta_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k != "mask_vec"}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        checkpoint.save(path, dict(self.state_dict()), asdict(self.cfg),
                        {"kind": "lm", "mask_id": self.mask_id, **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "LmModel":
        tensors, cfg, manifest = checkpoint.load(path)
        m = cls(LmConfig(**cfg), manifest.get("mask_id"))
        m.load_state_dict(tensors)
        m.requires_grad_(False)
        m.eval()
        return m

    def config_hash(self) -> str:
        return checkpoint.config_hash(asdict(self.cfg))


def embedding_matrix(model: LmModel) -> torch.Tensor:
    """V x h token embeddings as used in the forward pass (read-only copy)."""
    E = model.tok_emb.weight.detach().clone()
    if model.mask_id is not None:
        E[model.mask_id] = model.mask_vec.detach()
    return E


@torch.no_grad()
def greedy_decode(model: LmModel, prompt: Sequence[int] | torch.Tensor, adapter: LoraDelta | None = None,
                  max_new_tokens: int = 8, eos_id: int | None = None) -> list[int]:
    """Argmax continuation of ``prompt``; stops at ``eos_id`` (not returned)."""
    seq = torch.as_tensor(list(prompt) if not torch.is_tensor(prompt) else prompt, dtype=torch.long)
    if seq.numel() == 0:
        raise ValueError("empty prompt")
    out: list[int] = []
    for _ in range(max_new_tokens):
        if seq.numel() >= model.cfg.max_len:
            break
        logits = model(seq, adapter).logits[-1]
        nxt = int(torch.argmax(logits))
        if eos_id is not None and nxt == eos_id:
            break
        out.append(nxt)
        seq = torch.cat([seq, torch.tensor([nxt])])
    return out


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a (N, T) tensor; returns (tokens, valid mask)."""
    T = max(len(s) for s in seqs)
    toks = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    valid = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        toks[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        valid[i, : len(s)] = True
    return toks, valid


@dataclass
class LmExample:
    """Token sequence with per-position loss weights on the *target* (next) token."""
    tokens: list[int]
    weights: list[float] = field(default_factory=list)


def lm_loss(model: LmModel, batch: Sequence[LmExample], pad_id: int,
            adapter: LoraDelta | None = None) -> torch.Tensor:
    toks, _ = pad_batch([ex.tokens for ex in batch], pad_id)
    w = torch.zeros(toks.shape, dtype=torch.float32)
    for i, ex in enumerate(batch):
        ww = ex.weights or [1.0] * len(ex.tokens)
        w[i, : len(ww)] = torch.tensor(ww)
    logits = model(toks, adapter).logits[:, :-1]
    tgt = toks[:, 1:]
    wt = w[:, 1:].to(logits.dtype)
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="none")
    return (nll * wt.reshape(-1)).sum() / wt.sum().clamp_min(1e-12)


def pretrain_lm(examples: Sequence[LmExample], cfg: LmConfig, steps: int, pad_id: int,
                mask_id: int | None = None, batch_size: int = 16, lr: float = 1e-3,
                log_every: int = 200, model: LmModel | None = None) -> tuple[LmModel, list[float]]:
    """Next-token training, from scratch or continuing ``model``.

    Examples are visited in a seeded shuffle. Returns the frozen model and the loss curve.
    """
    if not examples:
        raise ValueError("empty corpus")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = LmModel(cfg, mask_id)
    model.requires_grad_(True)
    model.mask_vec.requires_grad_(False)
    model.train()
    opt = AdamW(model.parameters(), LrSchedule(steps, base_lr=lr, end_lr=lr * 0.01, warmup_fraction=0.05),
                weight_decay=0.01)
    rng = random.Random(cfg.seed)
    order: list[int] = []
    losses = []
    bad = 0
    for step in range(steps):
        if len(order) < batch_size:
            extra = list(range(len(examples)))
            rng.shuffle(extra)
            order.extend(extra)
        batch = [examples[i] for i in order[:batch_size]]
        del order[:batch_size]
        loss = lm_loss(model, batch, pad_id)
        opt.zero_grad()
        if not torch.isfinite(loss):
            bad += 1
            if bad > 10:
                raise Divergence("LM pretraining diverged")
            continue
        loss.backward()
        clip_grad_norm(opt.params, 1.0)
        try:
            opt.step()
        except Divergence:
            bad += 1
            if bad > 10:
                raise
            continue
        losses.append(float(loss.detach()))
        if log_every and step % log_every == 0:
            log.info("lm step %d loss %.4f", step, float(loss.detach()))
    model.requires_grad_(False)
    model.eval()
    return model, losses
