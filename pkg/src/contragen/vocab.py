"""Whitespace-token vocabulary with reserved control symbols.

Ids are dense from 0.  The four reserved symbols always occupy the first
four slots so that PAD == 0 can double as the padding value in tensors.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ValidationError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3


@dataclass
class Vocab:
    """Token <-> id map. ``itos[0:4]`` are the reserved symbols."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if list(self.itos[:4]) != list(RESERVED_TOKENS):
            raise ValidationError(
                f"vocabulary must start with reserved tokens {RESERVED_TOKENS}"
            )
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValidationError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    def encode(self, text: str) -> list[int]:
        """Map whitespace-split tokens to ids; out-of-vocabulary -> UNK."""
        return [self.stoi.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        """Map ids back to text, skipping reserved control ids."""
        toks = []
        for i in ids:
            if i < 0 or i >= len(self.itos):
                raise ValidationError(f"id {i} out of range for vocab of size {len(self)}")
            if i >= len(RESERVED_TOKENS):
                toks.append(self.itos[i])
        return " ".join(toks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(itos=[ln for ln in lines if ln])


def build_vocab(texts: Iterable[str]) -> Vocab:
    """Build a frequency-sorted vocabulary over whitespace tokens.

    Ties in frequency are broken lexicographically so the result is
    deterministic regardless of input order.
    """
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(text.split())
    if n_texts == 0 or not counts:
        raise ValidationError("cannot build a vocabulary from an empty training set")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(itos=list(RESERVED_TOKENS) + [tok for tok, _ in ordered])
