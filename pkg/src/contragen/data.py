"""Datasets, padded batches, and synthetic task generation.

The canonical on-disk format is JSON lines with ``source`` and ``target``
fields.  A two-file parallel-text importer is provided for convenience.
Target sequences are framed as ``[BOS, tokens..., EOS]`` before they reach
the decoder; sources carry no control tokens.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import torch

from .errors import ValidationError
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocab, build_vocab


@dataclass
class PaddedBatch:
    """Integer token ids padded to a common length.

    ``mask[i, j]`` is true exactly when ``j < lengths[i]``; padded slots
    hold PAD.
    """

    ids: torch.Tensor      # (batch, max_len) int64
    mask: torch.Tensor     # (batch, max_len) bool
    lengths: torch.Tensor  # (batch,) int64

    def __post_init__(self) -> None:
        if self.ids.shape != self.mask.shape:
            raise ValidationError("ids and mask shapes differ")
        if self.ids.shape[0] != self.lengths.shape[0]:
            raise ValidationError("lengths does not match batch size")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]]) -> "PaddedBatch":
        if not seqs:
            raise ValidationError("cannot batch zero sequences")
        lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
        if int(lengths.min()) == 0:
            raise ValidationError("cannot batch an empty sequence")
        width = int(lengths.max())
        ids = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
        mask = torch.arange(width).unsqueeze(0) < lengths.unsqueeze(1)
        return cls(ids=ids, mask=mask, lengths=lengths)

    def row(self, i: int) -> list[int]:
        return self.ids[i, : int(self.lengths[i])].tolist()


def frame_target(token_ids: Sequence[int]) -> list[int]:
    """Wrap raw target token ids as [BOS, tokens..., EOS]."""
    return [BOS_ID, *token_ids, EOS_ID]


def strip_target(framed: Sequence[int]) -> list[int]:
    """Inverse of :func:`frame_target`: drop control and PAD ids."""
    return [t for t in framed if t not in (PAD_ID, BOS_ID, EOS_ID)]


@dataclass
class ExamplePair:
    """One source/target pair, both as raw texts and encoded ids."""

    source_text: str
    target_text: str
    source_ids: list[int]
    target_ids: list[int]  # framed: [BOS, ..., EOS]


@dataclass
class ParallelDataset:
    pairs: list[ExamplePair] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> ExamplePair:
        return self.pairs[i]

    def source_batch(self, indices: Sequence[int]) -> PaddedBatch:
        return PaddedBatch.from_sequences([self.pairs[i].source_ids for i in indices])

    def target_batch(self, indices: Sequence[int]) -> PaddedBatch:
        return PaddedBatch.from_sequences([self.pairs[i].target_ids for i in indices])


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON record") from exc
    return records


def load_jsonl_dataset(path: str | Path, vocab: Vocab) -> ParallelDataset:
    """Load a JSONL file of {"source", "target"} records and encode it."""
    pairs = []
    for rec_no, rec in enumerate(read_jsonl(path), start=1):
        if "source" not in rec or "target" not in rec:
            raise ValidationError(f"{path}: record {rec_no} lacks source/target fields")
        src, tgt = str(rec["source"]), str(rec["target"])
        src_ids = vocab.encode(src)
        tgt_ids = vocab.encode(tgt)
        if not src_ids or not tgt_ids:
            raise ValidationError(f"{path}: record {rec_no} empty after tokenization")
        pairs.append(
            ExamplePair(
                source_text=src,
                target_text=tgt,
                source_ids=src_ids,
                target_ids=frame_target(tgt_ids),
            )
        )
    if not pairs:
        raise ValidationError(f"{path}: dataset is empty")
    return ParallelDataset(pairs=pairs)


def import_parallel_text(src_path: str | Path, tgt_path: str | Path, out_path: str | Path) -> int:
    """Convert two aligned text files into the canonical JSONL format."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValidationError(
            f"parallel files differ in length ({len(src_lines)} vs {len(tgt_lines)})"
        )
    with open(out_path, "w", encoding="utf-8") as fh:
        for src, tgt in zip(src_lines, tgt_lines):
            fh.write(json.dumps({"source": src, "target": tgt}) + "\n")
    return len(src_lines)


def build_vocab_from_jsonl(train_path: str | Path) -> Vocab:
    """Vocabulary over the train split only; dev/test OOV become UNK."""
    records = read_jsonl(train_path)
    texts = []
    for rec in records:
        texts.append(str(rec.get("source", "")))
        texts.append(str(rec.get("target", "")))
    return build_vocab(texts)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[list[int]]:
    """Deterministic per-epoch batch index plan.

    The order is a pure function of (seed, epoch) so training can be
    resumed mid-run and replay the identical stream.
    """
    order = list(range(n))
    if shuffle:
        random.Random((seed + 1) * 7919 + epoch).shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def iter_steps(
    n: int, batch_size: int, seed: int, shuffle: bool = True, start_step: int = 0
) -> Iterator[tuple[int, list[int]]]:
    """Yield (step, indices) forever, re-planning each epoch deterministically."""
    per_epoch = max(1, (n + batch_size - 1) // batch_size)
    step = start_step
    while True:
        epoch = step // per_epoch
        plan = batch_indices(n, batch_size, seed, epoch, shuffle)
        for b in range(step % per_epoch, per_epoch):
            yield step, plan[b]
            step += 1


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

SYNTHETIC_TASKS = ("copy", "reverse", "sort", "noisy-transduce")


@dataclass
class SyntheticTaskSpec:
    """Desk-scale synthetic transduction tasks.

    ``noisy-transduce`` draws a clean token sequence, sets the target to
    its ascending sort, and corrupts only the observed source with
    per-token replacement noise, so the clean target stays recoverable
    in distribution and sequence-level supervision is meaningful.
    """

    task: str = "copy"
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 10
    noise_rate: float = 0.0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in SYNTHETIC_TASKS:
            raise ValidationError(f"unknown synthetic task {self.task!r}")
        if not (0.0 <= self.noise_rate < 1.0):
            raise ValidationError("noise_rate must lie in [0, 1)")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValidationError("need 1 <= min_len <= max_len")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be at least 2")


def _token(i: int) -> str:
    return f"t{i:02d}"


def _make_pair(spec: SyntheticTaskSpec, rng: random.Random) -> dict:
    length = rng.randint(spec.min_len, spec.max_len)
    clean = [rng.randrange(spec.vocab_size) for _ in range(length)]
    if spec.task == "copy":
        source, target = clean, clean
    elif spec.task == "reverse":
        source, target = clean, clean[::-1]
    elif spec.task == "sort":
        source, target = clean, sorted(clean)
    else:  # noisy-transduce
        target = sorted(clean)
        source = []
        for tok in clean:
            if rng.random() < spec.noise_rate:
                repl = rng.randrange(spec.vocab_size - 1)
                source.append(repl if repl < tok else repl + 1)
            else:
                source.append(tok)
    return {
        "source": " ".join(_token(t) for t in source),
        "target": " ".join(_token(t) for t in target),
    }


def make_synthetic(spec: SyntheticTaskSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write train/dev/test JSONL splits; byte-identical for equal seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(spec.seed)
    paths = {}
    for split, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for _ in range(n):
                fh.write(json.dumps(_make_pair(spec, rng)) + "\n")
        paths[split] = path
    return paths
