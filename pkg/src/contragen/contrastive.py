"""Sequence-level oracle scoring, candidate ranking, and contrastive losses.

The oracle is a smoothed sentence-level n-gram precision score with a
brevity penalty (BLEU-style), computed on token ids after stripping
control tokens.  Two routes exist on purpose: :func:`oracle_score` is a
plain scalar implementation, and :func:`batch_oracle_scores` reproduces
it exactly with batched integer tensor arithmetic (shifted-equality
n-gram matching, no per-candidate host round-trips).  They are kept
independent so each can check the other.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from .data import strip_target
from .decoding import Candidate, CandidateSet
from .errors import ContractError, ValidationError
from .model import Representation, cosine_rows
from .vocab import BOS_ID, EOS_ID, PAD_ID

log = logging.getLogger(__name__)


@dataclass
class OracleConfig:
    """Sentence-score settings: n-gram order and add-k smoothing.

    Smoothing applies to orders above 1 only; a candidate with zero
    unigram overlap scores exactly 0.
    """

    max_ngram: int = 4
    smoothing: float = 1.0

    def __post_init__(self) -> None:
        if self.max_ngram < 1:
            raise ValidationError("max_ngram must be >= 1")
        if self.smoothing < 0.0:
            raise ValidationError("smoothing must be non-negative")


@dataclass
class LossConfig:
    gamma: float = 0.01
    tau: float = 1.0
    loss_kind: str = "npairs"

    def __post_init__(self) -> None:
        if self.gamma <= 0.0:
            raise ValidationError("gamma must be positive")
        if self.tau <= 0.0:
            raise ValidationError("tau must be positive")
        if self.loss_kind not in ("npairs", "infonce"):
            raise ValidationError("loss_kind must be 'npairs' or 'infonce'")


# ---------------------------------------------------------------------------
# Oracle scoring
# ---------------------------------------------------------------------------


def oracle_score(
    candidate_ids: Sequence[int], reference_ids: Sequence[int], cfg: OracleConfig | None = None
) -> float:
    """Sentence-level smoothed n-gram precision of one candidate.

    Plain Python reference route; see :func:`batch_oracle_scores` for the
    batched equivalent.
    """
    cfg = cfg or OracleConfig()
    cand = strip_target(candidate_ids)
    ref = strip_target(reference_ids)
    if not cand or not ref:
        log.warning("oracle_score: empty sequence after stripping control tokens")
        return 0.0
    c, r = len(cand), len(ref)
    n_max = min(cfg.max_ngram, c)
    log_sum = 0.0
    for n in range(1, n_max + 1):
        cand_grams = Counter(tuple(cand[i : i + n]) for i in range(c - n + 1))
        ref_grams = Counter(tuple(ref[i : i + n]) for i in range(max(r - n + 1, 0)))
        matches = sum(min(k, ref_grams[g]) for g, k in cand_grams.items())
        total = c - n + 1
        if n == 1:
            if matches == 0:
                return 0.0
            log_sum += math.log(matches / total)
        else:
            log_sum += math.log((matches + cfg.smoothing) / (total + cfg.smoothing))
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum / n_max)


def batch_oracle_scores(
    candidates: torch.Tensor, reference: torch.Tensor | Sequence[int], cfg: OracleConfig | None = None
) -> torch.Tensor:
    """Score every row of a padded candidate matrix against one reference.

    All n-gram match counting is integer tensor arithmetic (windowed
    equality products with occurrence-rank clipping), so results are
    deterministic and equal :func:`oracle_score` elementwise.  Rows must
    be well-formed: control tokens only as a leading BOS / trailing
    EOS+PAD block.
    """
    cfg = cfg or OracleConfig()
    if candidates.dim() != 2:
        raise ValidationError("candidates must be a 2-D id matrix")
    ref = strip_target(
        reference.tolist() if isinstance(reference, torch.Tensor) else list(reference)
    )
    n_rows, width = candidates.shape
    scores = torch.zeros(n_rows, dtype=torch.float64)
    if not ref:
        log.warning("batch_oracle_scores: empty reference after stripping")
        return scores

    valid = (candidates != PAD_ID) & (candidates != BOS_ID) & (candidates != EOS_ID)
    c_len = valid.sum(dim=1)                      # (rows,)
    ref_t = torch.tensor(ref, dtype=candidates.dtype)
    r = len(ref)

    n_max = c_len.clamp(max=cfg.max_ngram)        # per-row number of usable orders
    log_sum = torch.zeros(n_rows, dtype=torch.float64)
    unigram_hit = torch.zeros(n_rows, dtype=torch.bool)
    for n in range(1, int(min(cfg.max_ngram, width)) + 1):
        cand_win = candidates.unfold(1, n, 1)     # (rows, A, n)
        win_ok = valid.unfold(1, n, 1).all(dim=2)  # (rows, A)
        if r - n + 1 > 0:
            ref_win = ref_t.unfold(0, n, 1)        # (B, n)
            eq_ref = (cand_win.unsqueeze(2) == ref_win.unsqueeze(0).unsqueeze(0)).all(dim=3)
            ref_count = eq_ref.sum(dim=2)          # (rows, A) refs matching each window
        else:
            ref_count = torch.zeros_like(win_ok, dtype=torch.long)
        eq_self = (cand_win.unsqueeze(2) == cand_win.unsqueeze(1)).all(dim=3)  # (rows, A, A)
        eq_self = eq_self & win_ok.unsqueeze(1)
        a = win_ok.shape[1]
        tri = torch.tril(torch.ones(a, a, dtype=torch.bool))
        occ_rank = (eq_self & tri).sum(dim=2)      # 1-based rank among valid identical windows
        matched = win_ok & (occ_rank <= ref_count)
        m = matched.sum(dim=1).to(torch.float64)   # clipped match count
        t = win_ok.sum(dim=1).to(torch.float64)    # total candidate n-grams
        rows_on = c_len >= n                        # order n participates for these rows
        if n == 1:
            unigram_hit = m > 0
            p = torch.where(m > 0, m / t.clamp(min=1.0), torch.ones_like(m))
        else:
            p = (m + cfg.smoothing) / (t + cfg.smoothing)
        log_sum = log_sum + torch.where(rows_on, torch.log(p), torch.zeros_like(p))

    cl = c_len.to(torch.float64)
    brevity = torch.where(
        c_len > r, torch.ones(n_rows, dtype=torch.float64), torch.exp(1.0 - r / cl.clamp(min=1.0))
    )
    geo = torch.exp(log_sum / n_max.clamp(min=1).to(torch.float64))
    scores = brevity * geo
    scores[(c_len == 0) | ~unigram_hit] = 0.0
    if bool((c_len == 0).any()):
        log.warning("batch_oracle_scores: some rows empty after stripping")
    return scores


# ---------------------------------------------------------------------------
# Ranking and pair construction
# ---------------------------------------------------------------------------


def rank_candidates(
    cand_set: CandidateSet,
    reference_ids: Sequence[int],
    cfg: OracleConfig | None = None,
) -> CandidateSet:
    """Oracle-score, inject the ground truth at rank 0, and sort by rank.

    Ordering: oracle score descending, the ground truth winning ties,
    then length-penalized beam score descending, then original index.
    The returned set is reordered so that ``candidates[i].rank == i``.
    """
    cfg = cfg or OracleConfig()
    entries = list(cand_set.candidates)
    if not entries:
        raise ContractError("cannot rank an empty candidate set")
    width = max(len(c.ids) for c in entries)
    matrix = torch.full((len(entries), width), PAD_ID, dtype=torch.long)
    for i, c in enumerate(entries):
        matrix[i, : len(c.ids)] = torch.tensor(c.ids, dtype=torch.long)
    scores = batch_oracle_scores(matrix, list(reference_ids), cfg)
    for c, s in zip(entries, scores.tolist()):
        c.oracle_score = s

    if cand_set.ground_truth_index is None:
        truth = Candidate(
            ids=list(reference_ids),
            log_likelihood=0.0,
            length_penalized_score=0.0,
            oracle_score=1.0,
            is_ground_truth=True,
        )
        entries.append(truth)

    order = sorted(
        range(len(entries)),
        key=lambda i: (
            -entries[i].oracle_score,
            not entries[i].is_ground_truth,
            -entries[i].length_penalized_score,
            i,
        ),
    )
    ranked = [entries[i] for i in order]
    for rank, c in enumerate(ranked):
        c.rank = rank
    truth_pos = [i for i, c in enumerate(ranked) if c.is_ground_truth]
    return CandidateSet(
        source_id=cand_set.source_id,
        candidates=ranked,
        ground_truth_index=truth_pos[0] if truth_pos else cand_set.ground_truth_index,
        beam_exhausted=cand_set.beam_exhausted,
    )


@dataclass
class ContrastivePairs:
    """All ordered better/worse index pairs over a ranked set, with the
    per-pair margin ``gamma * (rank(worse) - rank(better))``."""

    pos_indices: torch.Tensor  # (P,) int64
    neg_indices: torch.Tensor  # (P,) int64
    margins: torch.Tensor      # (P,) float

    def __len__(self) -> int:
        return int(self.pos_indices.shape[0])


def build_pairs(ranked: CandidateSet, gamma: float) -> ContrastivePairs:
    """Form all C(n, 2) pairs from a ranked candidate set."""
    if gamma <= 0.0:
        raise ValidationError("gamma must be positive")
    n = len(ranked.candidates)
    for i, c in enumerate(ranked.candidates):
        if c.rank != i:
            raise ContractError("build_pairs requires a ranked candidate set")
    pos, neg = [], []
    for i in range(n):
        for j in range(i + 1, n):
            pos.append(i)
            neg.append(j)
    pos_t = torch.tensor(pos, dtype=torch.long)
    neg_t = torch.tensor(neg, dtype=torch.long)
    margins = gamma * (neg_t - pos_t).to(torch.float64)
    return ContrastivePairs(pos_indices=pos_t, neg_indices=neg_t, margins=margins)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _stack_reps(reps: "torch.Tensor | Sequence[Representation]") -> torch.Tensor:
    if isinstance(reps, torch.Tensor):
        return reps
    return torch.stack([r.z for r in reps])


def npairs_loss(
    z_x: "torch.Tensor | Representation",
    reps: "torch.Tensor | Sequence[Representation]",
    pairs: ContrastivePairs,
) -> torch.Tensor:
    """Sum of hinge losses over ranked pairs.

    For each (better, worse) pair: max(0, cos(z_x, z_worse) -
    cos(z_x, z_better) + margin).  Representations must be aligned with
    the ranked candidate order the pairs were built from.
    """
    zx = z_x.z if isinstance(z_x, Representation) else z_x
    matrix = _stack_reps(reps)
    n = matrix.shape[0]
    if len(pairs) == 0:
        return torch.zeros((), dtype=matrix.dtype)
    if int(pairs.neg_indices.max()) >= n or int(pairs.pos_indices.max()) >= n:
        raise ContractError("pair index out of range for representation list")
    cos = cosine_rows(zx, matrix)
    margins = pairs.margins.to(cos.dtype)
    gaps = cos[pairs.neg_indices] - cos[pairs.pos_indices] + margins
    return torch.clamp(gaps, min=0.0).sum()


def infonce_loss(
    z_x: "torch.Tensor | Representation",
    z_pos: "torch.Tensor | Representation",
    negatives: "torch.Tensor | Sequence[Representation]",
    tau: float,
) -> torch.Tensor:
    """Softmax contrastive loss of the positive against negatives.

    The denominator includes the positive itself, so the loss is a true
    negative log-probability (0 with an empty negative set).
    """
    if tau <= 0.0:
        raise ValidationError("tau must be positive")
    zx = z_x.z if isinstance(z_x, Representation) else z_x
    zp = z_pos.z if isinstance(z_pos, Representation) else z_pos
    negs = _stack_reps(negatives) if not isinstance(negatives, torch.Tensor) else negatives
    if negs.numel() == 0:
        log.warning("infonce_loss: empty negative set, loss is 0")
        return torch.zeros((), dtype=zx.dtype)
    sims = cosine_rows(zx, torch.cat([zp.unsqueeze(0), negs], dim=0)) / tau
    return torch.logsumexp(sims, dim=0) - sims[0]
