"""LoRA deltas: application, fusion (rank concatenation / averaging),
flattening and adapter files.

Flattening order is fixed: layers ascending; within a layer the targets in
``TARGETS`` order; for each target A (r x h_in) then B (h_out x r), both
row-major. A delta may carry a leading batch dimension on every A/B
(one adapter per example) during training.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from . import checkpoint

TARGETS = ("q", "v")


@dataclass(frozen=True)
class LoraShape:
    n_layers: int
    d_model: int
    rank: int = 2
    alpha: float = 32.0
    targets: tuple[str, ...] = TARGETS

    def target_dims(self, target: str) -> tuple[int, int]:
        # (h_in, h_out); q/v projections are square in the host LM
        return self.d_model, self.d_model

    def slice_len(self) -> int:
        return sum(self.rank * (i + o) for i, o in map(self.target_dims, self.targets))

    def flat_len(self) -> int:
        return self.n_layers * self.slice_len()


@dataclass(frozen=True)
class LoraDelta:
    """Per (layer, target) pairs A: r x h_in and B: h_out x r, plus rank/alpha."""

    A: dict[tuple[int, str], torch.Tensor]
    B: dict[tuple[int, str], torch.Tensor]
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def keys(self) -> list[tuple[int, str]]:
        return sorted(self.A, key=lambda k: (k[0], TARGETS.index(k[1]) if k[1] in TARGETS else k[1]))

    @property
    def batched(self) -> bool:
        return next(iter(self.A.values())).dim() == 3

    def dense(self, key: tuple[int, str]) -> torch.Tensor:
        """Scaled dense update scale * B @ A for one target."""
        return self.scale * (self.B[key] @ self.A[key])

    def layers(self) -> list[int]:
        return sorted({k[0] for k in self.A})

    def to(self, dtype: torch.dtype) -> "LoraDelta":
        return LoraDelta({k: v.to(dtype) for k, v in self.A.items()},
                         {k: v.to(dtype) for k, v in self.B.items()}, self.rank, self.alpha)

    def select(self, i: int) -> "LoraDelta":
        """Unbatched delta for batch element ``i``."""
        return LoraDelta({k: v[i] for k, v in self.A.items()},
                         {k: v[i] for k, v in self.B.items()}, self.rank, self.alpha)

    def detach(self) -> "LoraDelta":
        return LoraDelta({k: v.detach() for k, v in self.A.items()},
                         {k: v.detach() for k, v in self.B.items()}, self.rank, self.alpha)


def apply_delta(W: torch.Tensor, A: torch.Tensor, B: torch.Tensor, scale: float) -> torch.Tensor:
    """W + scale * B @ A."""
    if B.shape[-1] != A.shape[-2] or W.shape != (B.shape[-2], A.shape[-1]):
        raise ValueError(f"shape mismatch: W{tuple(W.shape)} B{tuple(B.shape)} A{tuple(A.shape)}")
    return W + scale * (B @ A)


def zeros(shape: LoraShape, dtype: torch.dtype = torch.float32) -> LoraDelta:
    A, B = {}, {}
    for layer in range(shape.n_layers):
        for t in shape.targets:
            i, o = shape.target_dims(t)
            A[(layer, t)] = torch.zeros(shape.rank, i, dtype=dtype)
            B[(layer, t)] = torch.zeros(o, shape.rank, dtype=dtype)
    return LoraDelta(A, B, shape.rank, shape.alpha)


def random(shape: LoraShape, generator: torch.Generator | None = None, std: float = 0.1,
           dtype: torch.dtype = torch.float64) -> LoraDelta:
    A, B = {}, {}
    for layer in range(shape.n_layers):
        for t in shape.targets:
            i, o = shape.target_dims(t)
            A[(layer, t)] = torch.randn(shape.rank, i, generator=generator, dtype=dtype) * std
            B[(layer, t)] = torch.randn(o, shape.rank, generator=generator, dtype=dtype) * std
    return LoraDelta(A, B, shape.rank, shape.alpha)


def _check_compatible(deltas: Sequence[LoraDelta], same_rank: bool) -> None:
    if not deltas:
        raise ValueError("no deltas to fuse")
    keys = set(deltas[0].A)
    for d in deltas[1:]:
        if set(d.A) != keys:
            raise ValueError("target mismatch between deltas")
        if same_rank and d.rank != deltas[0].rank:
            raise ValueError("rank mismatch between deltas")
        for k in keys:
            if d.A[k].shape[-1] != deltas[0].A[k].shape[-1] or d.B[k].shape[-2] != deltas[0].B[k].shape[-2]:
                raise ValueError(f"shape mismatch at {k}")


def fuse_concat_rank(deltas: Sequence[LoraDelta]) -> LoraDelta:
    """Stack A blocks and B blocks along the rank axis.

    Each source's own alpha/r is folded into its B block and the fused delta
    carries scale 1, so the fused dense update is exactly the sum of the
    members' dense updates.
    """
    _check_compatible(deltas, same_rank=False)
    A, B = {}, {}
    for k in deltas[0].A:
        A[k] = torch.cat([d.A[k] for d in deltas], dim=-2)
        B[k] = torch.cat([d.B[k] * d.scale for d in deltas], dim=-1)
    total = sum(d.rank for d in deltas)
    return LoraDelta(A, B, total, float(total))


def fuse_average(deltas: Sequence[LoraDelta]) -> LoraDelta:
    """Elementwise mean of A and of B (not of the dense updates)."""
    _check_compatible(deltas, same_rank=True)
    if len({d.alpha for d in deltas}) != 1:
        raise ValueError("alpha mismatch between deltas")
    n = len(deltas)
    A = {k: sum(d.A[k] for d in deltas) / n for k in deltas[0].A}
    B = {k: sum(d.B[k] for d in deltas) / n for k in deltas[0].B}
    return LoraDelta(A, B, deltas[0].rank, deltas[0].alpha)


def flatten(delta: LoraDelta) -> torch.Tensor:
    parts = []
    for k in delta.keys:
        lead = delta.A[k].shape[:-2]
        parts.append(delta.A[k].reshape(*lead, -1))
        parts.append(delta.B[k].reshape(*lead, -1))
    return torch.cat(parts, dim=-1)


def unflatten(vec: torch.Tensor, shape: LoraShape) -> LoraDelta:
    if vec.shape[-1] != shape.flat_len():
        raise ValueError(f"vector length {vec.shape[-1]} != expected {shape.flat_len()}")
    lead = vec.shape[:-1]
    A, B = {}, {}
    pos = 0
    r = shape.rank
    for layer in range(shape.n_layers):
        for t in shape.targets:
            i, o = shape.target_dims(t)
            A[(layer, t)] = vec[..., pos:pos + r * i].reshape(*lead, r, i)
            pos += r * i
            B[(layer, t)] = vec[..., pos:pos + o * r].reshape(*lead, o, r)
            pos += o * r
    return LoraDelta(A, B, shape.rank, shape.alpha)


def save_adapter(path: str | Path, delta: LoraDelta, extra: dict | None = None) -> None:
    tensors = {}
    for (layer, t) in delta.keys:
        tensors[f"layer{layer}.{t}.A"] = delta.A[(layer, t)]
        tensors[f"layer{layer}.{t}.B"] = delta.B[(layer, t)]
    manifest = {"rank": delta.rank, "alpha": delta.alpha,
                "targets": [[l, t] for l, t in delta.keys], **(extra or {})}
    checkpoint.save(path, tensors, config={"kind": "lora_adapter"}, manifest=manifest)


def load_adapter(path: str | Path) -> LoraDelta:
    tensors, _, manifest = checkpoint.load(path)
    A, B = {}, {}
    for layer, t in manifest["targets"]:
        A[(layer, t)] = tensors[f"layer{layer}.{t}.A"]
        B[(layer, t)] = tensors[f"layer{layer}.{t}.B"]
    return LoraDelta(A, B, int(manifest["rank"]), float(manifest["alpha"]))
