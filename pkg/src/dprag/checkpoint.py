"""Named-tensor checkpoint container shared by the LM, encoder, generator,
adapters and the attack decoder.

Storage is safetensors (little-endian raw buffers with a JSON header of
name/shape/dtype); the config record and manifest ride in its string metadata.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open

FORMAT_VERSION = "1"


class CheckpointError(RuntimeError):
    pass


def config_hash(cfg: dict[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path: str | Path, tensors: dict[str, torch.Tensor], config: dict[str, Any],
         manifest: dict[str, Any] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": json.dumps(config, sort_keys=True),
        "manifest": json.dumps(manifest or {}, sort_keys=True),
    }
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path), metadata=meta)


def load(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    tensors = load_file(str(path))
    return tensors, json.loads(meta["config"]), json.loads(meta["manifest"])


def checksum(tensors: dict[str, torch.Tensor]) -> str:
    """Order-independent digest of raw tensor bytes (freeze-contract audits)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.view(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return checksum(dict(module.state_dict()))
