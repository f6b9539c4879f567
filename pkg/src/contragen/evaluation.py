"""Corpus-level evaluation, the alpha ablation sweep, representation
export, and the self-generated-ratio throughput sweep.

All evaluation operates on the model's own token ids (the toy tasks have
synthetic vocabularies), so there is no detokenization step.
"""

from __future__ import annotations

import copy
import json
import math
import time
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from .contrastive import OracleConfig, oracle_score
from .data import ExamplePair, PaddedBatch, iter_steps, strip_target
from .decoding import BeamConfig, beam_search, rerank_select
from .errors import ValidationError
from .model import Seq2SeqTransformer, cosine_rows, pool_representation
from .training import (
    BaselineMode,
    TrainConfig,
    init_state,
    train_step,
)


def corpus_bleu(
    hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_ngram: int = 4
) -> float:
    """Corpus-level n-gram precision score in [0, 100].

    Counts are aggregated over the whole corpus before taking precisions
    (not an average of sentence scores); the usual brevity penalty
    applies and any zero precision sends the score to 0.
    """
    if len(hypotheses) != len(references):
        raise ValidationError("hypothesis and reference lists differ in length")
    if not hypotheses:
        raise ValidationError("cannot score an empty corpus")
    matches = [0] * max_ngram
    totals = [0] * max_ngram
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_ngram + 1):
            hyp_grams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
            ref_grams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
            matches[n - 1] += sum(min(k, ref_grams[g]) for g, k in hyp_grams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or any(t == 0 for t in totals) or any(m == 0 for m in matches):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_ngram
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


@dataclass
class EvalReport:
    corpus_bleu: float
    per_sentence: list[float]
    config: dict
    wall_clock: float

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "corpus_bleu": self.corpus_bleu,
                    "per_sentence": self.per_sentence,
                    "config": self.config,
                    "wall_clock": self.wall_clock,
                },
                indent=2,
            ),
            encoding="utf-8",
        )


def decode_corpus(
    model: Seq2SeqTransformer,
    pairs: list[ExamplePair],
    beam_cfg: BeamConfig,
    alpha: float,
    batch_size: int = 32,
) -> list[list[int]]:
    """Rerank-decode a dataset; returns stripped token ids per example."""
    hyps = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src = PaddedBatch.from_sequences([p.source_ids for p in chunk])
            model.eval()
            enc = model.encode(src)
            z_x = pool_representation(enc)
            sets = beam_search(model, src, beam_cfg, enc=enc)
            for s, cand_set in enumerate(sets):
                chosen = rerank_select(cand_set, z_x[s], alpha)
                hyps.append(strip_target(chosen.ids))
    return hyps


def evaluate_model(
    model: Seq2SeqTransformer,
    pairs: list[ExamplePair],
    beam_cfg: BeamConfig,
    alpha: float,
    batch_size: int = 32,
    config_snapshot: dict | None = None,
    oracle_cfg: OracleConfig | None = None,
) -> EvalReport:
    started = time.perf_counter()
    hyps = decode_corpus(model, pairs, beam_cfg, alpha, batch_size)
    refs = [strip_target(p.target_ids) for p in pairs]
    bleu = corpus_bleu(hyps, refs)
    per_sentence = [oracle_score(h, r, oracle_cfg) for h, r in zip(hyps, refs)]
    return EvalReport(
        corpus_bleu=bleu,
        per_sentence=per_sentence,
        config=config_snapshot or {},
        wall_clock=time.perf_counter() - started,
    )


@dataclass
class AblationTable:
    rows: list[tuple[float, float]]  # (alpha, corpus_bleu)

    def to_csv(self, path: str | Path) -> None:
        lines = ["alpha,bleu"] + [f"{a},{b:.4f}" for a, b in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


DEFAULT_ALPHA_GRID = (0.0, 0.2, 0.3, 0.5, 0.7, 1.0)


def ablate_alpha(
    model: Seq2SeqTransformer,
    pairs: list[ExamplePair],
    grid: Sequence[float],
    beam_cfg: BeamConfig,
    batch_size: int = 32,
) -> AblationTable:
    """Score the alpha grid, reusing one beam pass per input.

    Valid because reranking only reorders the fixed candidate pool.
    """
    if not grid:
        raise ValidationError("alpha grid must be non-empty")
    hyps: dict[float, list[list[int]]] = {a: [] for a in grid}
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src = PaddedBatch.from_sequences([p.source_ids for p in chunk])
            model.eval()
            enc = model.encode(src)
            z_x = pool_representation(enc)
            sets = beam_search(model, src, beam_cfg, enc=enc)
            for s, cand_set in enumerate(sets):
                for a in grid:
                    chosen = rerank_select(cand_set, z_x[s], a)
                    hyps[a].append(strip_target(chosen.ids))
    refs = [strip_target(p.target_ids) for p in pairs]
    return AblationTable(rows=[(a, corpus_bleu(hyps[a], refs)) for a in grid])


def export_representations(
    model: Seq2SeqTransformer,
    pairs: list[ExamplePair],
    out_path: str | Path,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig | None = None,
    batch_size: int = 32,
) -> int:
    """Write one JSON-lines record per exported sequence.

    Per input: its ground truth, the beam hypotheses, and the other
    targets of the same evaluation batch.  Each record carries the
    pooled vector, the oracle score against the input's ground truth,
    and the cosine to its own source representation so the export alone
    supports alignment analyses.
    """
    oracle_cfg = oracle_cfg or OracleConfig()
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh, torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            if len(chunk) < 2:
                break  # batch targets need at least one other example
            src = PaddedBatch.from_sequences([p.source_ids for p in chunk])
            tgt = PaddedBatch.from_sequences([p.target_ids for p in chunk])
            model.eval()
            enc = model.encode(src)
            z_x = pool_representation(enc)
            dec_h, _ = model.decode_teacher_forced(enc, tgt)
            z_tgt = pool_representation(dec_h)
            sets = beam_search(model, src, beam_cfg, enc=enc)

            def emit(source_id: int, group: str, oracle: float, z: torch.Tensor) -> None:
                nonlocal count
                cos = float(cosine_rows(z_x[source_id - start], z.unsqueeze(0))[0])
                fh.write(
                    json.dumps(
                        {
                            "source_id": source_id,
                            "group": group,
                            "oracle_score": oracle,
                            "cos_to_source": cos,
                            "z": [float(v) for v in z.tolist()],
                        }
                    )
                    + "\n"
                )
                count += 1

            for b, pair in enumerate(chunk):
                sid = start + b
                emit(sid, "ground_truth", 1.0, z_tgt[b])
                for cand in sets[b].candidates:
                    score = oracle_score(cand.ids, pair.target_ids, oracle_cfg)
                    emit(sid, "beam_hypothesis", score, cand.representation.z)
                for other in range(len(chunk)):
                    if other == b:
                        continue
                    score = oracle_score(chunk[other].target_ids, pair.target_ids, oracle_cfg)
                    emit(sid, "batch_target", score, z_tgt[other])
    return count


def selfgen_ratio_sweep(
    warm_model: Seq2SeqTransformer,
    train_pairs: list[ExamplePair],
    dev_pairs: list[ExamplePair],
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    ratios: Sequence[float],
    budget_steps: int,
    alpha: float = 0.5,
    eval_n: int = 200,
    eval_batch: int = 32,
) -> list[dict]:
    """Fixed-budget training runs per ratio; reports throughput + quality.

    Each run starts from a fresh copy of the warm model, trains
    ``budget_steps`` steps without validation, and is scored on a dev
    subset with rerank decoding.
    """
    rows = []
    for ratio in ratios:
        model = copy.deepcopy(warm_model)
        run_cfg = replace(cfg, selfgen_ratio=ratio, train_beam_size=None)
        state = init_state(model, run_cfg)
        state.warmed_up = True
        started = time.perf_counter()
        for step, idx in iter_steps(len(train_pairs), run_cfg.batch_size, run_cfg.seed):
            if step >= budget_steps:
                break
            batch = [train_pairs[i] for i in idx]
            train_step(state, batch, run_cfg, beam_cfg, oracle_cfg, BaselineMode.CONT_NPAIRS)
        elapsed = time.perf_counter() - started
        report = evaluate_model(model, dev_pairs[:eval_n], beam_cfg, alpha, eval_batch)
        rows.append(
            {
                "ratio": ratio,
                "steps_per_sec": budget_steps / elapsed if elapsed > 0 else float("inf"),
                "dev_bleu": report.corpus_bleu,
            }
        )
    return rows
