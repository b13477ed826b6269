"""Parameter generator: frozen document encoder + trainable LoRA generator."""
from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .lm import Block, pad_batch, sinusoidal
from .lora import LoraDelta, LoraShape, unflatten
from .numerics import AdamW, LrSchedule, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 256
    seed: int = 0


class DocEncoder(nn.Module):
    """Small bidirectional transformer encoder (stand-in for a pretrained one)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
            self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(cfg.d_model)
            self.mlm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.register_buffer("pos", sinusoidal(cfg.max_len, cfg.d_model).float(), persistent=False)
        self.frozen = False

    def forward(self, tokens: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
            valid = None if valid is None else valid[None]
        if tokens.shape[-1] > self.cfg.max_len:
            raise ValueError(f"document length {tokens.shape[-1]} exceeds encoder max_len {self.cfg.max_len}")
        x = self.tok_emb(tokens) + self.pos[: tokens.shape[-1]].to(self.tok_emb.weight.dtype)
        for i, blk in enumerate(self.blocks):
            x = blk(x, i, None, causal=False, key_mask=valid)
        x = self.ln_f(x)
        return x[0] if squeeze else x

    def freeze(self) -> "DocEncoder":
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, dict(self.state_dict()), asdict(self.cfg), {"kind": "encoder", "frozen": self.frozen})

    @classmethod
    def load(cls, path: str | Path) -> "DocEncoder":
        tensors, cfg, _ = checkpoint.load(path)
        enc = cls(EncoderConfig(**cfg))
        enc.load_state_dict(tensors)
        return enc.freeze()


def encode_documents(enc: DocEncoder, doc_tokens: Sequence[int] | torch.Tensor) -> torch.Tensor:
    """(L, d) contextual embeddings for one document token sequence."""
    toks = torch.as_tensor(list(doc_tokens) if not torch.is_tensor(doc_tokens) else doc_tokens, dtype=torch.long)
    if toks.numel() == 0:
        raise ValueError("empty document")
    return enc(toks)


def pretrain_encoder(docs: Sequence[Sequence[int]], cfg: EncoderConfig, steps: int, corrupt_id: int,
                     pad_id: int, special_ids: set[int], batch_size: int = 16, lr: float = 1e-3,
                     mask_prob: float = 0.15) -> tuple[DocEncoder, list[float]]:
    """Masked-token reconstruction on corpus documents, then freeze."""
    if not docs:
        raise ValueError("empty corpus")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    enc = DocEncoder(cfg)
    enc.train()
    opt = AdamW(enc.parameters(), LrSchedule(steps, base_lr=lr, end_lr=lr * 0.01, warmup_fraction=0.05))
    losses = []
    for step in range(steps):
        batch = [list(docs[rng.randrange(len(docs))]) for _ in range(batch_size)]
        toks, valid = pad_batch(batch, pad_id)
        pick = (torch.rand(toks.shape) < mask_prob) & valid
        for sid in special_ids:
            pick &= toks != sid
        if not pick.any():
            continue
        inp = toks.masked_fill(pick, corrupt_id)
        logits = enc.mlm_head(enc(inp, valid))
        loss = F.cross_entropy(logits[pick], toks[pick])
        opt.zero_grad()
        loss.backward()
        clip_grad_norm(opt.params, 1.0)
        opt.step()
        losses.append(float(loss.detach()))
    return enc.freeze(), losses


@torch.no_grad()
def mlm_accuracy(enc: DocEncoder, docs: Sequence[Sequence[int]], corrupt_id: int, pad_id: int,
                 special_ids: set[int], seed: int = 0, mask_prob: float = 0.15) -> float:
    g = torch.Generator().manual_seed(seed)
    toks, valid = pad_batch([list(d) for d in docs], pad_id)
    pick = (torch.rand(toks.shape, generator=g) < mask_prob) & valid
    for sid in special_ids:
        pick &= toks != sid
    logits = enc.mlm_head(enc(toks.masked_fill(pick, corrupt_id), valid))
    return float((logits[pick].argmax(-1) == toks[pick]).float().mean())


@dataclass
class GeneratorConfig:
    n_layers: int            # host LM layer count (one query row per layer)
    lm_d_model: int
    enc_d_model: int = 128
    rank: int = 2
    alpha: float = 32.0
    n_heads: int = 4
    depth: int = 2           # self-attention encoder blocks
    d_ff: int = 512
    a_init_std: float = 0.02
    seed: int = 0
    lm_hash: str = ""

    def lora_shape(self) -> LoraShape:
        return LoraShape(self.n_layers, self.lm_d_model, self.rank, self.alpha)


class GeneratorNet(nn.Module):
    """Learnable queries -> cross-attention over document embeddings ->
    self-attention encoder -> FFN emitting each layer's flattened LoRA slice."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        shape = cfg.lora_shape()
        d = cfg.enc_d_model
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.queries = nn.Parameter(torch.randn(cfg.n_layers, d))
            self.cross = nn.MultiheadAttention(d, cfg.n_heads, batch_first=True)
            layer = nn.TransformerEncoderLayer(d, cfg.n_heads, cfg.d_ff, dropout=0.0, batch_first=True,
                                               norm_first=True, activation="gelu")
            self.self_attn = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
            self.ffn = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, cfg.d_ff), nn.GELU(),
                                     nn.Linear(cfg.d_ff, shape.slice_len()))
            out = self.ffn[-1]
            with torch.no_grad():
                out.bias.zero_()
                out.weight.normal_(0.0, cfg.a_init_std)
                # B outputs start at zero so the initial delta is exactly zero
                out.weight[self.b_rows()] = 0.0

    def b_rows(self) -> torch.Tensor:
        shape = self.cfg.lora_shape()
        rows = []
        pos = 0
        for t in shape.targets:
            i, o = shape.target_dims(t)
            pos += shape.rank * i
            rows.extend(range(pos, pos + o * shape.rank))
            pos += o * shape.rank
        return torch.tensor(rows, dtype=torch.long)

    def forward(self, E_D: torch.Tensor, valid: torch.Tensor | None = None) -> LoraDelta:
        squeeze = E_D.dim() == 2
        if squeeze:
            E_D = E_D[None]
            valid = None if valid is None else valid[None]
        N = E_D.shape[0]
        Q = self.queries.to(E_D.dtype).unsqueeze(0).expand(N, -1, -1)
        pad = None if valid is None else ~valid
        H0, _ = self.cross(Q, E_D, E_D, key_padding_mask=pad, need_weights=False)
        H1 = self.self_attn(H0)
        flat = self.ffn(H1).reshape(N, -1)
        delta = unflatten(flat, self.cfg.lora_shape())
        return delta.select(0) if squeeze else delta

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        checkpoint.save(path, dict(self.state_dict()), asdict(self.cfg),
                        {"kind": "generator", "lm_hash": self.cfg.lm_hash, **(extra or {})})

    @classmethod
    def load(cls, path: str | Path, lm_hash: str | None = None) -> "GeneratorNet":
        tensors, cfg, manifest = checkpoint.load(path)
        if lm_hash is not None and manifest.get("lm_hash") != lm_hash:
            raise checkpoint.CheckpointError(
                f"generator was trained for LM {manifest.get('lm_hash')!r}, not {lm_hash!r}")
        gen = cls(GeneratorConfig(**cfg))
        gen.load_state_dict(tensors)
        gen.eval()
        return gen


def generate_lora(gen: GeneratorNet, E_D: torch.Tensor, valid: torch.Tensor | None = None) -> LoraDelta:
    return gen(E_D, valid)
