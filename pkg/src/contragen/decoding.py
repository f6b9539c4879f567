"""Beam search, diverse (grouped) beam search, and rerank decoding.

One batched engine serves both entry points: plain beam search is the
single-group, zero-penalty case.  Hypotheses keep their slot once they
emit EOS; the token that ends a hypothesis is still fed through the
decoder once so its hidden state enters the pooled representation, which
keeps beam-time representations identical in convention to the
teacher-forced ones used at training time.

Engine invocations are counted in :data:`CALL_COUNTS` so experiments can
assert, e.g., that pure likelihood training never generates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .data import PaddedBatch
from .errors import ContractError, ValidationError
from .model import HiddenStates, Representation, cosine_similarity, pool_representation
from .vocab import BOS_ID, EOS_ID, PAD_ID

NEG_INF = float("-inf")

CALL_COUNTS = {"beam_search": 0, "diverse_beam_search": 0}


def reset_call_counts() -> None:
    for k in CALL_COUNTS:
        CALL_COUNTS[k] = 0


@dataclass
class BeamConfig:
    beam_size: int = 4
    max_len: int = 32
    length_penalty: float = 1.0
    num_groups: int = 1
    diversity_strength: float = 0.0

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValidationError("beam_size must be >= 1")
        if self.num_groups < 1 or self.beam_size % self.num_groups != 0:
            raise ValidationError("num_groups must divide beam_size")
        if self.length_penalty <= 0.0:
            raise ValidationError("length_penalty must be positive")
        if self.diversity_strength < 0.0:
            raise ValidationError("diversity_strength must be non-negative")
        if self.max_len < 1:
            raise ValidationError("max_len must be >= 1")


@dataclass
class Candidate:
    """One hypothesis: framed ids, scores, and optional annotations."""

    ids: list[int]
    log_likelihood: float
    length_penalized_score: float
    representation: Representation | None = None
    oracle_score: float | None = None
    rank: int | None = None
    is_ground_truth: bool = False

    def __post_init__(self) -> None:
        if not self.ids or self.ids[0] != BOS_ID:
            raise ValidationError("candidate ids must begin with BOS")
        if self.log_likelihood > 1e-9:
            raise ValidationError("log_likelihood must be <= 0")
        if self.oracle_score is not None and not (-1e-9 <= self.oracle_score <= 1.0 + 1e-9):
            raise ValidationError("oracle_score must lie in [0, 1]")

    @property
    def gen_len(self) -> int:
        return len(self.ids) - 1


@dataclass
class CandidateSet:
    source_id: int = 0
    candidates: list[Candidate] = field(default_factory=list)
    ground_truth_index: int | None = None
    beam_exhausted: bool = False

    def __len__(self) -> int:
        return len(self.candidates)


class _EvalMode:
    """Temporarily put a torch module in eval mode (no-op otherwise)."""

    def __init__(self, model):
        self.model = model
        self.was_training = bool(getattr(model, "training", False))

    def __enter__(self):
        if self.was_training:
            self.model.eval()
        return self

    def __exit__(self, *exc):
        if self.was_training:
            self.model.train()
        return False


def _pool_rows(hidden_buf: torch.Tensor, gen_len: torch.Tensor) -> list[Representation]:
    """Average each row's hidden columns 0..gen_len (inclusive)."""
    reps = []
    for i in range(hidden_buf.shape[0]):
        n = int(gen_len[i]) + 1
        reps.append(Representation.from_vector(hidden_buf[i, :n].mean(dim=0)))
    return reps


def _run_beam(
    model,
    src: PaddedBatch,
    cfg: BeamConfig,
    num_groups: int,
    diversity: float,
    enc: HiddenStates | None = None,
) -> list[CandidateSet]:
    n_src = len(src)
    b = cfg.beam_size
    groups = num_groups
    gw = b // groups
    model_max = getattr(getattr(model, "cfg", None), "max_len", None)
    if model_max is not None and cfg.max_len + 1 > model_max:
        raise ValidationError(
            f"beam max_len {cfg.max_len} needs {cfg.max_len + 1} decoder positions, "
            f"model allows {model_max}"
        )

    with torch.no_grad(), _EvalMode(model):
        if enc is None:
            enc = model.encode(src)
        state = model.start_decoder(enc, repeat=b)
        n = n_src * b

        tokens = torch.full((n, 1), BOS_ID, dtype=torch.long)
        gen_len = torch.zeros(n, dtype=torch.long)
        cum_true = torch.zeros(n)       # sum of model log-probs
        cum_sel = torch.zeros(n)        # search objective (with diversity penalty)
        done = torch.zeros(n, dtype=torch.bool)
        dead = torch.zeros(n, dtype=torch.bool)
        prev = torch.full((n,), BOS_ID, dtype=torch.long)
        hidden_buf: torch.Tensor | None = None

        finished_early = False
        for t in range(cfg.max_len):
            log_probs, h = model.decode_step(state, prev)
            col = h.unsqueeze(1)
            hidden_buf = col if hidden_buf is None else torch.cat([hidden_buf, col], dim=1)
            if bool((done | dead).all()):
                finished_early = True
                break

            vocab = log_probs.shape[1]
            log_probs = log_probs.clone()
            log_probs[:, PAD_ID] = NEG_INF
            log_probs[:, BOS_ID] = NEG_INF

            parent = torch.empty(n, dtype=torch.long)
            next_tok = torch.full((n,), PAD_ID, dtype=torch.long)
            is_stay = torch.zeros(n, dtype=torch.bool)
            new_dead = torch.zeros(n, dtype=torch.bool)
            new_cum_sel = torch.empty(n)
            counts = torch.zeros(n_src, vocab)

            for g in range(groups):
                # slot indices of this group for every source, shape (n_src, gw)
                offs = torch.arange(gw) + g * gw
                rows = (torch.arange(n_src).unsqueeze(1) * b + offs.unsqueeze(0))
                flat_rows = rows.reshape(-1)

                lp = log_probs.index_select(0, flat_rows).view(n_src, gw, vocab)
                adj = lp - diversity * counts.unsqueeze(1) if diversity > 0.0 else lp
                expand = cum_sel.index_select(0, flat_rows).view(n_src, gw, 1) + adj
                blocked = (done | dead).index_select(0, flat_rows).view(n_src, gw)
                expand = expand.masked_fill(blocked.unsqueeze(2), NEG_INF)
                if t == 0:
                    # all slots hold the same BOS prefix; expand one per group
                    expand[:, 1:, :] = NEG_INF
                stay = cum_sel.index_select(0, flat_rows).view(n_src, gw)
                stay = stay.masked_fill(
                    ~done.index_select(0, flat_rows).view(n_src, gw), NEG_INF
                )
                pool = torch.cat([expand.reshape(n_src, gw * vocab), stay], dim=1)
                val, idx = torch.topk(pool, gw, dim=1)

                stay_pick = idx >= gw * vocab
                parent_off = torch.where(stay_pick, idx - gw * vocab, idx // vocab)
                tok = torch.where(stay_pick, torch.full_like(idx, PAD_ID), idx % vocab)
                slot_dead = torch.isinf(val)

                parent[flat_rows] = rows.gather(1, parent_off).reshape(-1)
                next_tok[flat_rows] = tok.reshape(-1)
                is_stay[flat_rows] = stay_pick.reshape(-1)
                new_dead[flat_rows] = slot_dead.reshape(-1)
                new_cum_sel[flat_rows] = val.reshape(-1)

                if diversity > 0.0:
                    chosen = ~stay_pick & ~slot_dead
                    if bool(chosen.any()):
                        src_idx = (
                            torch.arange(n_src).unsqueeze(1).expand(n_src, gw)[chosen]
                        )
                        counts.index_put_(
                            (src_idx, tok[chosen]), torch.ones(int(chosen.sum())), accumulate=True
                        )

            state.reorder(parent)
            hidden_buf = hidden_buf.index_select(0, parent)
            tokens = tokens.index_select(0, parent)
            gen_len = gen_len.index_select(0, parent)
            cum_true = cum_true.index_select(0, parent)
            done = done.index_select(0, parent)
            dead = new_dead

            extend = ~is_stay & ~dead
            tokens = torch.cat([tokens, next_tok.unsqueeze(1)], dim=1)
            tokens[~extend, -1] = PAD_ID
            step_lp = log_probs.index_select(0, parent).gather(
                1, next_tok.clamp(min=0).unsqueeze(1)
            ).squeeze(1)
            cum_true = torch.where(extend, cum_true + step_lp, cum_true)
            cum_sel = torch.where(extend | is_stay, new_cum_sel, torch.full_like(new_cum_sel, NEG_INF))
            gen_len = torch.where(extend, gen_len + 1, gen_len)
            done = (done & is_stay) | (extend & (next_tok == EOS_ID))
            prev = torch.where(extend, next_tok, torch.full_like(next_tok, PAD_ID))

        if not finished_early:
            # the tokens selected on the last iteration still need one pass
            # so their hidden states enter the pooled representations
            _, h = model.decode_step(state, prev)
            hidden_buf = torch.cat([hidden_buf, h.unsqueeze(1)], dim=1)

        reps = _pool_rows(hidden_buf, gen_len)
        sets = []
        for s in range(n_src):
            cands = []
            for slot in range(b):
                r = s * b + slot
                if bool(dead[r]):
                    continue
                length = int(gen_len[r])
                ll = float(cum_true[r])
                cands.append(
                    Candidate(
                        ids=tokens[r, : length + 1].tolist(),
                        log_likelihood=min(ll, 0.0),
                        length_penalized_score=ll / (length ** cfg.length_penalty),
                        representation=reps[r],
                    )
                )
            cands.sort(key=lambda c: -c.length_penalized_score)
            sets.append(
                CandidateSet(
                    source_id=s, candidates=cands, beam_exhausted=len(cands) < b
                )
            )
        return sets


def beam_search(
    model, src: PaddedBatch, cfg: BeamConfig, enc: HiddenStates | None = None
) -> list[CandidateSet]:
    """Standard beam search; one CandidateSet per source row.

    ``cfg.num_groups`` and ``cfg.diversity_strength`` are ignored here;
    use :func:`diverse_beam_search` for grouped decoding.
    """
    CALL_COUNTS["beam_search"] += 1
    return _run_beam(model, src, cfg, num_groups=1, diversity=0.0, enc=enc)


def diverse_beam_search(
    model, src: PaddedBatch, cfg: BeamConfig, enc: HiddenStates | None = None
) -> list[CandidateSet]:
    """Grouped beam search with a Hamming diversity penalty.

    Groups decode sequentially at each position; a token already chosen
    by earlier groups at the same position is penalized by
    ``diversity_strength`` per occurrence.
    """
    CALL_COUNTS["diverse_beam_search"] += 1
    return _run_beam(
        model, src, cfg, num_groups=cfg.num_groups, diversity=cfg.diversity_strength, enc=enc
    )


def rerank_select(
    cands: CandidateSet, z_x: "Representation | torch.Tensor", alpha: float
) -> Candidate:
    """Pick the candidate maximizing
    ``alpha * cos(z_x, z_cand) + (1 - alpha) * exp(length_penalized_score)``.

    The likelihood term is the length-penalized sequence probability in
    (0, 1], so alpha = 0 reproduces the vanilla beam ordering exactly.
    Ties go to the lower candidate index.
    """
    if not cands.candidates:
        raise ContractError("rerank_select needs a non-empty candidate set")
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError("alpha must lie in [0, 1]")
    best_idx, best_score = 0, NEG_INF
    for i, c in enumerate(cands.candidates):
        if c.representation is None:
            raise ContractError("every candidate needs a representation for reranking")
        if alpha == 0.0:
            sim = 0.0
        else:
            sim = cosine_similarity(z_x, c.representation)
        score = alpha * sim + (1.0 - alpha) * math.exp(c.length_penalized_score)
        if score > best_score:
            best_idx, best_score = i, score
    return cands.candidates[best_idx]


def generate(
    model, src: PaddedBatch, cfg: BeamConfig, alpha: float = 0.0
) -> list[list[int]]:
    """Beam search + similarity reranking; returns framed ids per source."""
    with torch.no_grad(), _EvalMode(model):
        enc = model.encode(src)
        z_x = pool_representation(enc)
    sets = beam_search(model, src, cfg, enc=enc)
    outs = []
    for s, cand_set in enumerate(sets):
        chosen = rerank_select(cand_set, z_x[s], alpha)
        outs.append(list(chosen.ids))
    return outs


def candidate_batch(candidates: Sequence[Candidate]) -> PaddedBatch:
    """Pad a list of candidates into a decoder-ready batch."""
    return PaddedBatch.from_sequences([c.ids for c in candidates])
