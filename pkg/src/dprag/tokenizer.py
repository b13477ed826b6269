"""Whitespace word-level tokenizer with reserved special tokens."""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

PAD = "<|pad|>"
MASK = "<|doc_mask|>"
SEP = "<|sep|>"
EOA = "<|eoa|>"
BOS = "<|bos|>"
UNK = "<|unk|>"
SPECIALS = (PAD, MASK, SEP, EOA, BOS, UNK)

_PUNCT = re.compile(r"([?,.!;:])")


def normalize(text: str) -> list[str]:
    """Lowercase and split, detaching punctuation into its own tokens."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


class Tokenizer:
    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for w in words:
            if w not in seen:
                seen.add(w)
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        vocab: set[str] = set()
        for t in texts:
            vocab.update(normalize(t))
        vocab -= set(SPECIALS)
        return cls(sorted(vocab))

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def mask_id(self) -> int:
        return self.stoi[MASK]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    @property
    def eoa_id(self) -> int:
        return self.stoi[EOA]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def special_ids(self) -> set[int]:
        return {self.stoi[s] for s in SPECIALS}

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in normalize(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            w = self.itos[i]
            if skip_special and w in SPECIALS:
                continue
            words.append(w)
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"version": 1, "itos": self.itos}))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        data = json.loads(Path(path).read_text())
        tok = cls([])
        tok.itos = data["itos"]
        tok.stoi = {w: i for i, w in enumerate(tok.itos)}
        return tok
