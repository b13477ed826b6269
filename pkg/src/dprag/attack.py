"""Reconstruction attack: invert generated LoRA weights back into document text.

The inversion decoder is a small causal transformer whose first position is a
linear projection of the (standardized) flattened delta. Attack quality is
scored with clipped ROUGE-2 recall on a held-out document split.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import random
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from . import checkpoint
from .generator import DocEncoder, GeneratorNet, encode_documents
from .lm import sinusoidal
from .lora import flatten
from .numerics import Divergence, clip_grad_norm
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)


@dataclass
class AttackDataset:
    vectors: torch.Tensor          # (N, F) flattened deltas
    docs: list[list[int]]          # document token ids
    doc_ids: list[str]
    train_idx: list[int]
    test_idx: list[int]
    seed: int = 0

    def __post_init__(self):
        if set(self.train_idx) & set(self.test_idx):
            raise ValueError("train and test splits overlap")
        if len(self.docs) != self.vectors.shape[0]:
            raise ValueError("one vector per document required")

    def zeroed(self) -> "AttackDataset":
        """Same documents and split, every input vector replaced by zeros."""
        return AttackDataset(torch.zeros_like(self.vectors), self.docs, self.doc_ids,
                             self.train_idx, self.test_idx, self.seed)


def split_indices(n: int, seed: int, test_fraction: float = 0.003, min_test: int = 20) -> tuple[list[int], list[int]]:
    n_test = max(min_test, math.ceil(test_fraction * n))
    if n_test >= n:
        raise ValueError(f"corpus of {n} docs too small for a {n_test}-doc test split")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return sorted(order[n_test:]), sorted(order[:n_test])


@torch.no_grad()
def build_attack_set(corpus: Sequence[tuple[str, str]], gen: GeneratorNet, enc: DocEncoder, tok: Tokenizer,
                     seed: int = 0, test_fraction: float = 0.003, min_test: int = 20,
                     max_doc_len: int = 160) -> AttackDataset:
    """One (flattened delta, document) pair per corpus entry."""
    vecs, docs, ids = [], [], []
    gen.eval()
    for doc_id, text in corpus:
        toks = tok.encode(text)[:max_doc_len]
        delta = gen(encode_documents(enc, toks))
        vecs.append(flatten(delta).float())
        docs.append(toks)
        ids.append(doc_id)
    V = torch.stack(vecs)
    if V.abs().max() == 0:
        warnings.warn("all generated deltas are zero; the attack is a negative control", stacklevel=2)
    train, test = split_indices(len(docs), seed, test_fraction, min_test)
    return AttackDataset(V, docs, ids, train, test, seed)


@dataclass
class AttackConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    max_len: int = 168
    seed: int = 0


class InversionDecoder(nn.Module):
    def __init__(self, in_dim: int, vocab_size: int, cfg: AttackConfig, eoa_id: int, pad_id: int):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg, self.in_dim, self.vocab_size = cfg, in_dim, vocab_size
        self.eoa_id, self.pad_id = eoa_id, pad_id
        self.proj = nn.Linear(in_dim, cfg.d_model)
        self.emb = nn.Embedding(vocab_size, cfg.d_model)
        layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, dropout=0.0,
                                           batch_first=True, norm_first=True, activation="gelu")
        self.body = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, vocab_size)
        # input standardization, fitted on the train split
        self.register_buffer("mu", torch.zeros(in_dim))
        self.register_buffer("sd", torch.ones(in_dim))
        self.register_buffer("pos", sinusoidal(cfg.max_len + 1, cfg.d_model).float())

    def forward(self, vec: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Logits (B, 1+T, V); position 0 is the conditioning vector."""
        cond = self.proj((vec - self.mu) / self.sd)[:, None]
        x = torch.cat([cond, self.emb(prefix)], 1)
        x = x + self.pos[: x.shape[1]]
        causal = nn.Transformer.generate_square_subsequent_mask(x.shape[1])
        return self.head(self.ln(self.body(x, mask=causal, is_causal=True)))

    @torch.no_grad()
    def generate(self, vec: torch.Tensor, max_len: int | None = None) -> list[int]:
        out: list[int] = []
        for _ in range(max_len or self.cfg.max_len):
            prefix = torch.tensor([out], dtype=torch.long)
            nxt = int(self(vec[None], prefix)[0, -1].argmax())
            if nxt == self.eoa_id:
                break
            out.append(nxt)
        return out

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"in_dim": self.in_dim, "vocab_size": self.vocab_size, "eoa_id": self.eoa_id,
                "pad_id": self.pad_id, **asdict(self.cfg)}
        checkpoint.save(path, dict(self.state_dict()), meta, extra or {})

    @classmethod
    def load(cls, path: str | Path) -> "InversionDecoder":
        tensors, meta, _ = checkpoint.load(path)
        meta = dict(meta)
        head = {k: meta.pop(k) for k in ("in_dim", "vocab_size", "eoa_id", "pad_id")}
        m = cls(head["in_dim"], head["vocab_size"], AttackConfig(**meta), head["eoa_id"], head["pad_id"])
        m.load_state_dict(tensors)
        return m.eval()


def _batch(docs: Sequence[list[int]], eoa: int, pad: int, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [d[: max_len - 1] + [eoa] for d in docs]
    T = max(map(len, seqs))
    tgt = torch.full((len(seqs), T), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        tgt[i, : len(s)] = torch.tensor(s)
    # inputs are the targets shifted right; position 0 is the conditioning slot
    return tgt[:, :-1], tgt


@dataclass
class TrainedAttack:
    decoder: InversionDecoder
    checkpoints: list[Path]
    epoch_losses: list[float]


def train_reconstructor(ds: AttackDataset, cfg: AttackConfig, vocab_size: int, eoa_id: int, pad_id: int,
                        ckpt_dir: str | Path | None = None) -> TrainedAttack:
    """Maximum-likelihood training on the train split only; one checkpoint per epoch."""
    dec = InversionDecoder(ds.vectors.shape[1], vocab_size, cfg, eoa_id, pad_id)
    X = ds.vectors[ds.train_idx]
    dec.mu.copy_(X.mean(0))
    dec.sd.copy_(X.std(0, unbiased=False).clamp_min(1e-6))
    opt = torch.optim.AdamW(dec.parameters(), lr=cfg.lr, weight_decay=0.01)
    rng = random.Random(cfg.seed)
    ckpts: list[Path] = []
    losses: list[float] = []
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        order = list(ds.train_idx)
        rng.shuffle(order)
        total, n = 0.0, 0
        dec.train()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            inp, tgt = _batch([ds.docs[i] for i in idx], eoa_id, pad_id, cfg.max_len)
            logits = dec(ds.vectors[idx], inp)
            loss = nn.functional.cross_entropy(logits.reshape(-1, vocab_size), tgt.reshape(-1), ignore_index=pad_id)
            if not torch.isfinite(loss):
                raise Divergence(f"attack loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(list(dec.parameters()), 1.0)
            opt.step()
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        losses.append(total / n)
        log.info("attack epoch %d loss %.4f", epoch, losses[-1])
        if ckpt_dir is not None:
            p = Path(ckpt_dir) / f"inversion_epoch{epoch:03d}.safetensors"
            dec.save(p, {"epoch": epoch, "loss": losses[-1]})
            ckpts.append(p)
    return TrainedAttack(dec.eval(), ckpts, losses)


def _bigrams(tokens: Sequence[str]) -> Counter:
    return Counter(zip(tokens, tokens[1:]))


def rouge2_recall(prediction: str | Sequence[str], reference: str | Sequence[str]) -> float:
    """Clipped bigram recall of ``reference`` by ``prediction`` (whitespace tokens for strings)."""
    pred = prediction.split() if isinstance(prediction, str) else list(prediction)
    ref = reference.split() if isinstance(reference, str) else list(reference)
    if len(ref) < 2:
        raise ValueError("reference needs at least 2 tokens to have a bigram")
    rb, pb = _bigrams(ref), _bigrams(pred)
    hit = sum(min(c, pb[g]) for g, c in rb.items())
    return hit / sum(rb.values())


@dataclass
class CurvePoint:
    checkpoint_id: str
    mean_recall: float
    max_recall: float
    per_doc: dict[str, float] = field(default_factory=dict)


@dataclass
class AttackReport:
    curve: list[CurvePoint]
    split: str
    config_hash: str = ""
    seed: int = 0

    @property
    def best_recall(self) -> float:
        return max(p.mean_recall for p in self.curve)

    @property
    def mean_recall(self) -> float:
        return sum(p.mean_recall for p in self.curve) / len(self.curve)

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "split": self.split,
                "best_recall": self.best_recall, "mean_recall": self.mean_recall,
                "curve": [asdict(p) for p in self.curve]}

    def save(self, json_path: str | Path, csv_path: str | Path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint_id", "mean_recall", "max_recall", "config_hash", "seed"])
            for p in self.curve:
                w.writerow([p.checkpoint_id, f"{p.mean_recall:.6f}", f"{p.max_recall:.6f}", self.config_hash, self.seed])


def score_decoder(dec: InversionDecoder, ds: AttackDataset, split: str = "test") -> dict[str, float]:
    idx = ds.test_idx if split == "test" else ds.train_idx
    out = {}
    for i in idx:
        pred = dec.generate(ds.vectors[i])
        ref = ds.docs[i]
        out[ds.doc_ids[i]] = rouge2_recall([str(t) for t in pred], [str(t) for t in ref]) if len(ref) >= 2 else 0.0
    return out


def run_attack(ds: AttackDataset, checkpoints: Sequence[str | Path], split: str = "test",
               config_hash: str = "", seed: int = 0) -> AttackReport:
    """ROUGE-2 recall curve, one point per decoder checkpoint."""
    if not checkpoints:
        raise ValueError("no checkpoints to evaluate")
    curve = []
    for p in checkpoints:
        per_doc = score_decoder(InversionDecoder.load(p), ds, split)
        vals = list(per_doc.values())
        curve.append(CurvePoint(Path(p).stem, sum(vals) / len(vals), max(vals), per_doc))
    return AttackReport(curve, split, config_hash, seed)
