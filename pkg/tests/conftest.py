"""Shared fixtures and stub models for the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import pytest
import torch

from contragen.data import PaddedBatch
from contragen.model import HiddenStates, ModelConfig, Seq2SeqTransformer
from contragen.training import build_model
from contragen.vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID


@pytest.fixture
def tiny_model() -> Seq2SeqTransformer:
    """Deterministic d=32 model with dropout off, vocab 12, eval mode."""
    cfg = ModelConfig(
        d_model=32, n_layers=2, n_heads=4, ffn_dim=64,
        dropout_rate=0.0, vocab_size=12, max_len=24,
    )
    model = build_model(cfg, seed=7)
    model.eval()
    return model


def random_source(rng, vocab_size: int, min_len: int = 2, max_len: int = 8) -> list[int]:
    length = rng.randint(min_len, max_len)
    return [rng.randint(4, vocab_size - 1) for _ in range(length)]


def random_target(rng, vocab_size: int, min_len: int = 1, max_len: int = 8) -> list[int]:
    length = rng.randint(min_len, max_len)
    return [BOS_ID] + [rng.randint(4, vocab_size - 1) for _ in range(length)] + [EOS_ID]


@dataclass
class _TableState:
    rows: int
    length: int = 0

    @property
    def batch_size(self) -> int:
        return self.rows

    def reorder(self, index: torch.Tensor) -> None:
        self.rows = int(index.shape[0])


class TabularModel:
    """Stub decoder with a fixed next-token table per position.

    Satisfies the duck-typed protocol of the beam engine; hidden vectors
    are one-hot encodings of the token just fed, so pooled
    representations are well defined and nonzero.
    """

    def __init__(self, tables: list[dict[int, float]], vocab_size: int):
        self.vocab_size = vocab_size
        self.tables = []
        for table in tables:
            row = torch.full((vocab_size,), -1e9)
            total = sum(table.values())
            for tok, p in table.items():
                row[tok] = math.log(p / total)
            self.tables.append(row)

    def encode(self, src: PaddedBatch) -> HiddenStates:
        values = torch.nn.functional.one_hot(src.ids, self.vocab_size).float()
        return HiddenStates(values=values, mask=src.mask)

    def start_decoder(self, enc: HiddenStates, repeat: int = 1) -> _TableState:
        return _TableState(rows=len(enc) * repeat)

    def decode_step(self, state: _TableState, prev: torch.Tensor):
        table = self.tables[min(state.length, len(self.tables) - 1)]
        state.length += 1
        log_probs = table.unsqueeze(0).expand(state.rows, -1).clone()
        hidden = torch.nn.functional.one_hot(prev, self.vocab_size).float()
        return log_probs, hidden

    def log_prob(self, position: int, token: int) -> float:
        return float(self.tables[min(position, len(self.tables) - 1)][token])


def unigram_model(probs: dict[int, float], vocab_size: int) -> TabularModel:
    return TabularModel([probs], vocab_size)


def enumerate_hypotheses(
    model: TabularModel, max_len: int, length_penalty: float
) -> list[tuple[float, tuple[int, ...], float]]:
    """All complete hypotheses (ending in EOS or truncated at max_len),
    as (length_penalized_score, tokens-after-BOS, log_likelihood), best
    first.  Independent of the beam engine."""
    allowed = [
        tok for tok in range(model.vocab_size)
        if tok not in (PAD_ID, BOS_ID) and model.log_prob(0, tok) > -1e8
    ]
    results = []

    def rec(prefix: tuple[int, ...], ll: float) -> None:
        if prefix and prefix[-1] == EOS_ID:
            results.append((prefix, ll))
            return
        if len(prefix) == max_len:
            results.append((prefix, ll))
            return
        for tok in allowed:
            rec(prefix + (tok,), ll + model.log_prob(len(prefix), tok))

    rec((), 0.0)
    scored = [(ll / len(seq) ** length_penalty, seq, ll) for seq, ll in results if seq]
    return sorted(scored, key=lambda item: -item[0])


def single_source_batch(n_tokens: int = 3) -> PaddedBatch:
    return PaddedBatch.from_sequences([[UNK_ID] * n_tokens])
