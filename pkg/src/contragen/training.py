"""Two-stage training: likelihood warm-up, then joint likelihood +
contrastive training over self-generated and from-batch candidates.

Determinism contract: the torch RNG is re-seeded from (seed, step) at the
top of every step and the batch plan is a pure function of (seed, epoch),
so runs are reproducible and checkpoint resume replays the identical
stream.  Generation runs in eval mode under no_grad; gradients reach the
candidates only through the teacher-forced representation pass.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch

from .contrastive import (
    OracleConfig,
    build_pairs,
    infonce_loss,
    npairs_loss,
    rank_candidates,
)
from .data import ExamplePair, PaddedBatch, iter_steps
from .decoding import BeamConfig, Candidate, CandidateSet, diverse_beam_search
from .errors import ConfigError, ContractError, DivergenceError, ValidationError
from .model import (
    HiddenStates,
    ModelConfig,
    Seq2SeqTransformer,
    nll_loss,
    pool_representation,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "nll", "ctr", "total", "dev_nll", "dev_ctr")


class BaselineMode(Enum):
    MLE = "MLE"
    NAIVE_CL_INFONCE = "NAIVE_CL_INFONCE"
    NAIVE_CL_NPAIRS = "NAIVE_CL_NPAIRS"
    CONT_INFONCE = "CONT_INFONCE"
    CONT_NPAIRS = "CONT_NPAIRS"
    DROPOUT_CL = "DROPOUT_CL"


NPAIRS_MODES = (BaselineMode.NAIVE_CL_NPAIRS, BaselineMode.CONT_NPAIRS)
INFONCE_MODES = (BaselineMode.NAIVE_CL_INFONCE, BaselineMode.CONT_INFONCE)
SELFGEN_MODES = (BaselineMode.CONT_INFONCE, BaselineMode.CONT_NPAIRS)


@dataclass
class TrainConfig:
    warmup_max_steps: int = 5000
    warmup_patience: int = 3
    max_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 5e-4
    optimizer: str = "adam"
    lr_schedule: str = "fixed"        # fixed | inverse_sqrt
    lr_warmup_steps: int = 400
    m: int = 16
    train_beam_size: int | None = None  # defaults to round(selfgen_ratio * m)
    selfgen_ratio: float = 0.75
    train_diversity: float = 1.0
    gamma: float = 0.01
    loss_kind: str = "npairs"
    tau: float = 1.0
    ctr_weight: float = 1.0
    clip_norm: float = 1.0
    validate_every: int = 100
    validate_n: int = 128
    early_stop_patience: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValidationError("m must be at least 2")
        if not (0.0 <= self.selfgen_ratio <= 1.0):
            raise ValidationError("selfgen_ratio must lie in [0, 1]")
        if self.train_beam_size is not None and not (0 <= self.train_beam_size <= self.m):
            raise ValidationError("train_beam_size must lie in [0, m]")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("fixed", "inverse_sqrt"):
            raise ValidationError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_max_steps < 0:
            raise ValidationError("batch_size must be >= 1 and step budgets >= 0")
        if self.validate_every < 1:
            raise ValidationError("validate_every must be >= 1")
        if self.early_stop_patience < 0 or self.warmup_patience < 0:
            raise ValidationError("patience values must be >= 0")

    def selfgen_count(self, mode: BaselineMode) -> int:
        if mode not in SELFGEN_MODES:
            return 0
        if self.train_beam_size is not None:
            return self.train_beam_size
        return round(self.selfgen_ratio * self.m)


@dataclass
class TrainState:
    model: Seq2SeqTransformer
    optimizer: torch.optim.Optimizer
    step: int = 0
    best_dev_loss: float = math.inf
    bad_validations: int = 0
    warmed_up: bool = False
    best_model_state: dict | None = None
    baseline_dev_loss: float | None = None
    history: list[dict] = field(default_factory=list)


def adopt_best(state: TrainState) -> TrainState:
    """Load the best validated parameters into the live model.

    Stage loops keep the live parameters untouched so a mid-run
    checkpoint can resume step-for-step; call this when a stage is done
    and the best checkpoint becomes the result.
    """
    if state.best_model_state is not None:
        state.model.load_state_dict(state.best_model_state)
    return state


def build_model(cfg: ModelConfig, seed: int) -> Seq2SeqTransformer:
    """Seeded model construction; equal seeds give equal parameters."""
    torch.manual_seed(_mix(seed, 0))
    return Seq2SeqTransformer(cfg)


def init_state(model: Seq2SeqTransformer, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return TrainState(model=model, optimizer=opt)


def _mix(seed: int, step: int) -> int:
    return ((seed + 1) * 1_000_003 + step * 7919 + 12345) % (2 ** 31)


def _set_lr(state: TrainState, cfg: TrainConfig) -> None:
    if cfg.lr_schedule == "fixed":
        return
    warm = max(1, cfg.lr_warmup_steps)
    step = max(1, state.step + 1)
    scale = min(step / warm, math.sqrt(warm / step))
    for group in state.optimizer.param_groups:
        group["lr"] = cfg.learning_rate * scale


def _batches_of(pairs: list[ExamplePair]) -> tuple[PaddedBatch, PaddedBatch]:
    src = PaddedBatch.from_sequences([p.source_ids for p in pairs])
    tgt = PaddedBatch.from_sequences([p.target_ids for p in pairs])
    return src, tgt


def _train_beam_config(cfg: TrainConfig, beam_cfg: BeamConfig, k_self: int) -> BeamConfig:
    return BeamConfig(
        beam_size=k_self,
        max_len=beam_cfg.max_len,
        length_penalty=beam_cfg.length_penalty,
        num_groups=k_self,
        diversity_strength=cfg.train_diversity,
    )


def assemble_candidates(
    pairs: list[ExamplePair],
    model: Seq2SeqTransformer,
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    mode: BaselineMode,
) -> list[CandidateSet]:
    """Per source: up to m candidates, self-generated first, then targets
    of other batch members in index order (own-target duplicates skipped).

    Generation happens in eval mode under no_grad; candidate token ids are
    constants as far as the training graph is concerned.
    """
    k_self = cfg.selfgen_count(mode)
    n = len(pairs)
    if k_self > 0:
        src, _ = _batches_of(pairs)
        sets = diverse_beam_search(model, src, _train_beam_config(cfg, beam_cfg, k_self))
    else:
        sets = [CandidateSet(source_id=i) for i in range(n)]

    short = 0
    for i, cand_set in enumerate(sets):
        cand_set.source_id = i
        want = cfg.m - len(cand_set.candidates)
        own = pairs[i].target_ids
        j = (i + 1) % n
        while want > 0 and j != i:
            other = pairs[j].target_ids
            if other != own:
                cand_set.candidates.append(
                    Candidate(ids=list(other), log_likelihood=0.0, length_penalized_score=0.0)
                )
                want -= 1
            j = (j + 1) % n
        if want > 0:
            short += 1
    if short:
        log.warning("assemble_candidates: %d set(s) below m=%d (batch too small)", short, cfg.m)
    return sets


def _candidate_forward(
    model: Seq2SeqTransformer,
    enc: HiddenStates,
    ranked: list[CandidateSet],
) -> tuple[torch.Tensor, torch.Tensor, PaddedBatch, list[int]]:
    """Teacher-forced pass over every ranked candidate of every source.

    Returns pooled representations (one per candidate, ranked order),
    logits for the ground-truth rows, the ground-truth sub-batch, and the
    per-source candidate counts.
    """
    counts = [len(s.candidates) for s in ranked]
    seqs = [c.ids for s in ranked for c in s.candidates]
    flat = PaddedBatch.from_sequences(seqs)
    rep_counts = torch.tensor(counts, dtype=torch.long)
    enc_flat = HiddenStates(
        values=enc.values.repeat_interleave(rep_counts, dim=0),
        mask=enc.mask.repeat_interleave(rep_counts, dim=0),
    )
    dec_h, logits = model.decode_teacher_forced(enc_flat, flat)
    reps = pool_representation(dec_h)

    gt_rows = []
    offset = 0
    for s in ranked:
        if s.ground_truth_index is None:
            raise ContractError("ranked candidate set lacks a ground-truth entry")
        gt_rows.append(offset + s.ground_truth_index)
        offset += len(s.candidates)
    rows = torch.tensor(gt_rows, dtype=torch.long)
    gt_batch = PaddedBatch(
        ids=flat.ids.index_select(0, rows),
        mask=flat.mask.index_select(0, rows),
        lengths=flat.lengths.index_select(0, rows),
    )
    return reps, logits.index_select(0, rows), gt_batch, counts


def _contrastive_losses(
    z_x: torch.Tensor,
    reps: torch.Tensor,
    ranked: list[CandidateSet],
    counts: list[int],
    cfg: TrainConfig,
    mode: BaselineMode,
) -> torch.Tensor:
    terms = []
    offset = 0
    for i, s in enumerate(ranked):
        r = reps[offset : offset + counts[i]]
        if mode in NPAIRS_MODES:
            pairs = build_pairs(s, cfg.gamma)
            terms.append(npairs_loss(z_x[i], r, pairs))
        else:
            gt = s.ground_truth_index
            negs = torch.cat([r[:gt], r[gt + 1 :]], dim=0)
            terms.append(infonce_loss(z_x[i], r[gt], negs, cfg.tau))
        offset += counts[i]
    return torch.stack(terms).mean()


def dropout_cl_positives(
    pairs: list[ExamplePair], model: Seq2SeqTransformer
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Two stochastic decoder views of the same targets.

    Returns (z_x, view1, view2, view1 logits).  With dropout disabled the
    views coincide and the baseline degenerates, which is warned about.
    """
    if model.cfg.dropout_rate == 0.0:
        log.warning("dropout_cl_positives: dropout_rate is 0, views will be identical")
    src, tgt = _batches_of(pairs)
    enc = model.encode(src)
    z_x = pool_representation(enc)
    h1, logits1 = model.decode_teacher_forced(enc, tgt)
    h2, _ = model.decode_teacher_forced(enc, tgt)
    return z_x, pool_representation(h1), pool_representation(h2), logits1


def compute_losses(
    pairs: list[ExamplePair],
    model: Seq2SeqTransformer,
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    mode: BaselineMode,
) -> dict[str, torch.Tensor]:
    """Forward pass for one batch under the given mode.

    Runs in whatever train/eval mode the model is currently in, so the
    same code serves both optimization and validation.
    """
    if mode is BaselineMode.MLE:
        src, tgt = _batches_of(pairs)
        enc = model.encode(src)
        _, logits = model.decode_teacher_forced(enc, tgt)
        nll = nll_loss(logits, tgt, model.cfg.label_smoothing)
        return {"nll": nll, "total": nll}

    if mode is BaselineMode.DROPOUT_CL:
        src, tgt = _batches_of(pairs)
        z_x, v1, v2, logits = dropout_cl_positives(pairs, model)
        nll = nll_loss(logits, tgt, model.cfg.label_smoothing)
        terms = []
        for i in range(len(pairs)):
            negs = torch.cat([v1[:i], v1[i + 1 :]], dim=0)
            terms.append(
                0.5 * (infonce_loss(z_x[i], v1[i], negs, cfg.tau)
                       + infonce_loss(z_x[i], v2[i], negs, cfg.tau))
            )
        ctr = torch.stack(terms).mean()
        return {"nll": nll, "ctr": ctr, "total": nll + cfg.ctr_weight * ctr}

    sets = assemble_candidates(pairs, model, cfg, beam_cfg, mode)
    ranked = [
        rank_candidates(sets[i], pairs[i].target_ids, oracle_cfg) for i in range(len(pairs))
    ]
    src, _ = _batches_of(pairs)
    enc = model.encode(src)
    z_x = pool_representation(enc)
    reps, gt_logits, gt_batch, counts = _candidate_forward(model, enc, ranked)
    nll = nll_loss(gt_logits, gt_batch, model.cfg.label_smoothing)
    ctr = _contrastive_losses(z_x, reps, ranked, counts, cfg, mode)
    return {"nll": nll, "ctr": ctr, "total": nll + cfg.ctr_weight * ctr}


def train_step(
    state: TrainState,
    pairs: list[ExamplePair],
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    mode: BaselineMode,
) -> dict[str, float]:
    """One optimizer update; returns finite metrics or raises."""
    torch.manual_seed(_mix(cfg.seed, state.step))
    state.model.train()
    _set_lr(state, cfg)
    losses = compute_losses(pairs, state.model, cfg, beam_cfg, oracle_cfg, mode)
    total = losses["total"]
    if not bool(torch.isfinite(total)):
        raise DivergenceError(
            f"non-finite loss at step {state.step}; "
            "restart from the last persisted checkpoint"
        )
    state.optimizer.zero_grad()
    total.backward()
    if cfg.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.clip_norm)
    state.optimizer.step()
    state.step += 1
    return {k: float(v.detach()) for k, v in losses.items()}


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def dev_nll(model: Seq2SeqTransformer, pairs: list[ExamplePair], batch_size: int = 64) -> float:
    """Position-weighted mean NLL over a dataset, in eval mode."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src, tgt = _batches_of(chunk)
            enc = model.encode(src)
            _, logits = model.decode_teacher_forced(enc, tgt)
            n_pos = int(tgt.mask[:, 1:].sum())
            total += float(nll_loss(logits, tgt)) * n_pos
            count += n_pos
    return total / max(count, 1)


def dev_token_accuracy(
    model: Seq2SeqTransformer, pairs: list[ExamplePair], batch_size: int = 64
) -> float:
    """Teacher-forced next-token accuracy over predicted positions."""
    model.eval()
    hit, count = 0, 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            src, tgt = _batches_of(chunk)
            enc = model.encode(src)
            _, logits = model.decode_teacher_forced(enc, tgt)
            keep = tgt.mask.clone()
            keep[:, 0] = False
            pred = logits.argmax(dim=-1)
            hit += int((pred[keep] == tgt.ids[keep]).sum())
            count += int(keep.sum())
    return hit / max(count, 1)


def dev_contrastive_loss(
    model: Seq2SeqTransformer,
    pairs: list[ExamplePair],
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    mode: BaselineMode,
) -> float:
    """Contrastive loss on the first ``validate_n`` dev examples, eval mode."""
    subset = pairs[: cfg.validate_n]
    model.eval()
    total, batches = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(subset), cfg.batch_size):
            chunk = subset[i : i + cfg.batch_size]
            if len(chunk) < 2:
                break
            losses = compute_losses(chunk, model, cfg, beam_cfg, oracle_cfg, mode)
            total += float(losses["ctr"])
            batches += 1
    return total / max(batches, 1)


# ---------------------------------------------------------------------------
# Stage loops
# ---------------------------------------------------------------------------


class _MetricLog:
    def __init__(self, path: Path | None):
        self.rows: list[dict] = []
        self._fh = None
        self._writer = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._fh, fieldnames=CSV_COLUMNS)
            self._writer.writeheader()

    def add(self, row: dict) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _snapshot(model: Seq2SeqTransformer) -> dict:
    return copy.deepcopy(model.state_dict())


def _run_stage(
    state: TrainState,
    train_pairs: list[ExamplePair],
    dev_pairs: list[ExamplePair],
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    mode: BaselineMode,
    max_steps: int,
    patience: int,
    validate,
    log_path: Path | None,
) -> TrainState:
    metric_log = _MetricLog(log_path)
    if state.best_model_state is None:
        state.best_model_state = _snapshot(state.model)
    stream = iter_steps(len(train_pairs), cfg.batch_size, cfg.seed, start_step=state.step)
    try:
        for step, idx in stream:
            if step >= max_steps:
                break
            pairs = [train_pairs[i] for i in idx]
            metrics = train_step(state, pairs, cfg, beam_cfg, oracle_cfg, mode)
            row = {"step": state.step, **{k: f"{v:.6f}" for k, v in metrics.items()}}
            if state.step % cfg.validate_every == 0:
                dev_metrics = validate()
                row.update({k: f"{v:.6f}" for k, v in dev_metrics.items()})
                watched = dev_metrics["dev_ctr" if mode is not BaselineMode.MLE else "dev_nll"]
                if watched < state.best_dev_loss:
                    state.best_dev_loss = watched
                    state.bad_validations = 0
                    state.best_model_state = _snapshot(state.model)
                else:
                    state.bad_validations += 1
                state.model.train()
                metric_log.add(row)
                state.history.append(row)
                if state.bad_validations > patience:
                    log.info("early stop at step %d (patience exhausted)", state.step)
                    break
            else:
                metric_log.add(row)
                state.history.append(row)
    finally:
        metric_log.close()
    return state


def warmup_train(
    state: TrainState,
    train_pairs: list[ExamplePair],
    dev_pairs: list[ExamplePair],
    cfg: TrainConfig,
    log_path: Path | None = None,
    beam_cfg: BeamConfig | None = None,
    oracle_cfg: OracleConfig | None = None,
) -> TrainState:
    """Likelihood-only stage; stops when dev NLL stops improving."""
    beam_cfg = beam_cfg or BeamConfig()
    oracle_cfg = oracle_cfg or OracleConfig()

    def validate() -> dict:
        return {"dev_nll": dev_nll(state.model, dev_pairs, cfg.batch_size)}

    state = _run_stage(
        state, train_pairs, dev_pairs, cfg, beam_cfg, oracle_cfg,
        BaselineMode.MLE, cfg.warmup_max_steps, cfg.warmup_patience, validate, log_path,
    )
    state.warmed_up = True
    return state


def train_loop(
    state: TrainState,
    train_pairs: list[ExamplePair],
    dev_pairs: list[ExamplePair],
    cfg: TrainConfig,
    beam_cfg: BeamConfig,
    oracle_cfg: OracleConfig,
    mode: BaselineMode,
    log_path: Path | None = None,
    resume: bool = False,
) -> TrainState:
    """Contrastive (or continued MLE) stage with dev-loss early stopping.

    Validates the incoming checkpoint once before any update so the best
    checkpoint can never be worse than the starting point; that baseline
    is kept out of the CSV, which holds exactly one row per step taken.
    """
    if mode is not BaselineMode.MLE and not state.warmed_up:
        raise ConfigError("contrastive training requires a warm-up checkpoint")

    def validate() -> dict:
        out = {"dev_nll": dev_nll(state.model, dev_pairs[: cfg.validate_n], cfg.batch_size)}
        if mode is not BaselineMode.MLE:
            out["dev_ctr"] = dev_contrastive_loss(
                state.model, dev_pairs, cfg, beam_cfg, oracle_cfg, mode
            )
        return out

    if not resume:
        # stage-local bookkeeping starts fresh
        state.step = 0
        state.bad_validations = 0
        state.history = []
        baseline = validate()
        watched = baseline["dev_ctr" if mode is not BaselineMode.MLE else "dev_nll"]
        state.baseline_dev_loss = watched
        state.best_dev_loss = watched
        state.best_model_state = _snapshot(state.model)
        state.model.train()

    return _run_stage(
        state, train_pairs, dev_pairs, cfg, beam_cfg, oracle_cfg,
        mode, cfg.max_steps, cfg.early_stop_patience, validate, log_path,
    )
