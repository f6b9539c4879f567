"""Transformer encoder-decoder substrate.

Conventions used throughout the package:

* Source rows carry plain token ids (no control tokens); target and
  candidate rows are framed ``[BOS, tokens..., EOS]``.
* ``decode_teacher_forced`` returns logits aligned so that ``logits[:, t]``
  is the distribution over position ``t`` given positions ``< t``.  Slot 0
  (the BOS slot) is a constant zero row: BOS is conditioning, never a
  prediction.
* Sequence representations are masked average pools of final-layer
  hidden states, over every non-PAD position (BOS and EOS included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PaddedBatch
from .errors import ContractError, ValidationError
from .vocab import BOS_ID, PAD_ID

COSINE_EPS = 1e-8


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    dropout_rate: float = 0.1
    vocab_size: int = 24
    max_len: int = 64
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValidationError("d_model must be divisible by n_heads")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValidationError("label_smoothing must lie in [0, 1)")
        if self.vocab_size < 5:
            raise ValidationError("vocab_size must cover the four reserved ids")
        if self.max_len < 2:
            raise ValidationError("max_len must be at least 2")


@dataclass
class HiddenStates:
    """Final-layer hidden vectors with their validity mask."""

    values: torch.Tensor  # (batch, len, d)
    mask: torch.Tensor    # (batch, len) bool

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[-1]


@dataclass
class Representation:
    """A pooled sequence embedding with its cached Euclidean norm."""

    z: torch.Tensor  # (d,)
    norm: float

    @classmethod
    def from_vector(cls, z: torch.Tensor) -> "Representation":
        return cls(z=z, norm=float(torch.linalg.vector_norm(z.detach().double())))


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    """Fixed sin/cos position table, shape (max_len, d_model)."""
    pos = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    half = torch.arange(0, d_model, 2, dtype=torch.float32)
    freq = torch.exp(-math.log(10000.0) * half / d_model)
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def project_kv(self, kv_input: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k_proj(kv_input)), self._split(self.v_proj(kv_input))

    def attend(
        self,
        q_input: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        attn_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        """Attention given pre-projected keys/values.

        ``attn_mask`` is boolean, broadcastable to (batch, heads, q, k);
        true marks *allowed* pairs.
        """
        q = self._split(self.q_proj(q_input)) * self.scale
        scores = torch.matmul(q, k.transpose(-2, -1))
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, float("-inf"))
        probs = self.dropout(torch.softmax(scores, dim=-1))
        ctx = torch.matmul(probs, v)
        b, _, t, _ = ctx.shape
        return self.out_proj(ctx.transpose(1, 2).reshape(b, t, -1))

    def forward(
        self,
        q_input: torch.Tensor,
        kv_input: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        k, v = self.project_kv(kv_input)
        return self.attend(q_input, k, v, attn_mask)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout_rate)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        attn_mask = key_mask[:, None, None, :]
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, attn_mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention, cross-attention, feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout_rate)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(
        self,
        x: torch.Tensor,
        enc_values: torch.Tensor,
        enc_key_mask: torch.Tensor,
        causal_mask: torch.Tensor,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, causal_mask))
        x = x + self.dropout(
            self.cross_attn(self.norm2(x), enc_values, enc_key_mask[:, None, None, :])
        )
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x

    def step(self, x: torch.Tensor, cache: "LayerCache") -> torch.Tensor:
        """One-token decode using cached keys/values; appends to the cache."""
        h = self.norm1(x)
        k_new, v_new = self.self_attn.project_kv(h)
        if cache.self_k is None:
            cache.self_k, cache.self_v = k_new, v_new
        else:
            cache.self_k = torch.cat([cache.self_k, k_new], dim=2)
            cache.self_v = torch.cat([cache.self_v, v_new], dim=2)
        x = x + self.dropout(self.self_attn.attend(h, cache.self_k, cache.self_v, None))
        x = x + self.dropout(
            self.cross_attn.attend(
                self.norm2(x), cache.cross_k, cache.cross_v, cache.enc_key_mask[:, None, None, :]
            )
        )
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


@dataclass
class LayerCache:
    cross_k: torch.Tensor
    cross_v: torch.Tensor
    enc_key_mask: torch.Tensor
    self_k: torch.Tensor | None = None
    self_v: torch.Tensor | None = None

    def reorder(self, index: torch.Tensor) -> None:
        self.cross_k = self.cross_k.index_select(0, index)
        self.cross_v = self.cross_v.index_select(0, index)
        self.enc_key_mask = self.enc_key_mask.index_select(0, index)
        if self.self_k is not None:
            self.self_k = self.self_k.index_select(0, index)
            self.self_v = self.self_v.index_select(0, index)


@dataclass
class DecodeState:
    """Incremental decoding state: one cache per decoder layer."""

    caches: list[LayerCache]
    length: int = 0

    @property
    def batch_size(self) -> int:
        return self.caches[0].cross_k.shape[0]

    def reorder(self, index: torch.Tensor) -> None:
        for c in self.caches:
            c.reorder(index)


class Seq2SeqTransformer(nn.Module):
    """Encoder-decoder with teacher-forced and incremental decoding paths.

    Both paths share the same parameters and produce the same conditional
    distributions; the incremental path exists so beam search does not
    recompute full prefixes each step.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD_ID)
        nn.init.normal_(self.embed.weight, mean=0.0, std=cfg.d_model ** -0.5)
        nn.init.zeros_(self.embed.weight[PAD_ID])
        self.embed_scale = math.sqrt(cfg.d_model)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_len, cfg.d_model), persistent=False
        )
        self.input_dropout = nn.Dropout(cfg.dropout_rate)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.vocab_size)

    # -- shared -----------------------------------------------------------

    def _embed_positions(self, ids: torch.Tensor, offset: int = 0) -> torch.Tensor:
        length = ids.shape[1]
        if offset + length > self.cfg.max_len:
            raise ValidationError(
                f"sequence length {offset + length} exceeds model max_len {self.cfg.max_len}"
            )
        pos = self.positions[offset : offset + length].to(self.embed.weight.dtype)
        return self.input_dropout(self.embed(ids) * self.embed_scale + pos)

    def _check_ids(self, batch: PaddedBatch) -> None:
        if int(batch.ids.max()) >= self.cfg.vocab_size or int(batch.ids.min()) < 0:
            raise ValidationError("token id out of range for model vocabulary")

    # -- encoder ----------------------------------------------------------

    def encode(self, src: PaddedBatch) -> HiddenStates:
        """Encode a source batch; PAD positions never influence real ones."""
        self._check_ids(src)
        x = self._embed_positions(src.ids)
        for layer in self.enc_layers:
            x = layer(x, src.mask)
        return HiddenStates(values=self.enc_norm(x), mask=src.mask)

    # -- teacher-forced decoder -------------------------------------------

    def decode_teacher_forced(
        self, enc: HiddenStates, target: PaddedBatch
    ) -> tuple[HiddenStates, torch.Tensor]:
        """Causal decode of a framed target batch.

        Returns the decoder hidden states (one per target position) and
        logits of shape (batch, target_len, vocab) where ``logits[:, t]``
        predicts ``target.ids[:, t]`` from strictly earlier positions.
        """
        self._check_ids(target)
        if len(enc) != len(target):
            raise ContractError(
                f"encoder batch ({len(enc)}) and target batch ({len(target)}) sizes differ"
            )
        if bool((target.ids[:, 0] != BOS_ID).any()):
            raise ValidationError("target rows must begin with BOS")
        b, t = target.ids.shape
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=target.ids.device))
        x = self._embed_positions(target.ids)
        for layer in self.dec_layers:
            x = layer(x, enc.values, enc.mask, causal[None, None])
        h = self.dec_norm(x)
        shifted = self.out_proj(h[:, :-1])
        logits = torch.cat(
            [torch.zeros(b, 1, self.cfg.vocab_size, dtype=shifted.dtype, device=shifted.device), shifted],
            dim=1,
        )
        return HiddenStates(values=h, mask=target.mask), logits

    # -- incremental decoder ----------------------------------------------

    def start_decoder(self, enc: HiddenStates, repeat: int = 1) -> DecodeState:
        """Prepare an incremental state; each source row may be repeated
        ``repeat`` times (consecutively) for beam-style decoding."""
        values, mask = enc.values, enc.mask
        if repeat > 1:
            values = values.repeat_interleave(repeat, dim=0)
            mask = mask.repeat_interleave(repeat, dim=0)
        caches = []
        for layer in self.dec_layers:
            k, v = layer.cross_attn.project_kv(values)
            caches.append(LayerCache(cross_k=k, cross_v=v, enc_key_mask=mask))
        return DecodeState(caches=caches)

    def decode_step(
        self, state: DecodeState, prev_tokens: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Feed one token per row; return (next-token log-probs, hidden).

        The hidden vector belongs to the position of the token just fed,
        matching the teacher-forced hidden for the same prefix.
        """
        if prev_tokens.shape[0] != state.batch_size:
            raise ContractError("prev_tokens does not match decode state batch size")
        x = self._embed_positions(prev_tokens.unsqueeze(1), offset=state.length)
        for layer, cache in zip(self.dec_layers, state.caches):
            x = layer.step(x, cache)
        state.length += 1
        h = self.dec_norm(x)[:, 0]
        log_probs = F.log_softmax(self.out_proj(h), dim=-1)
        return log_probs, h


# ---------------------------------------------------------------------------
# Losses and pooling
# ---------------------------------------------------------------------------


def nll_loss(
    logits: torch.Tensor, target: PaddedBatch, label_smoothing: float = 0.0
) -> torch.Tensor:
    """Mean negative log-likelihood over predicted target positions.

    Positions with PAD and the BOS slot (t = 0, which is conditioning,
    not a prediction) are excluded from the mean.
    """
    if logits.shape[:2] != target.ids.shape:
        raise ContractError(
            f"logits shape {tuple(logits.shape[:2])} does not match targets {tuple(target.ids.shape)}"
        )
    keep = target.mask.clone()
    keep[:, 0] = False
    if not bool(keep.any()):
        raise ContractError("no predicted positions in target batch")
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, target.ids.unsqueeze(-1)).squeeze(-1)
    nll = -picked[keep].mean()
    if label_smoothing > 0.0:
        smooth = -log_probs[keep].mean(dim=-1).mean()
        nll = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    return nll


def sequence_log_likelihoods(logits: torch.Tensor, target: PaddedBatch) -> torch.Tensor:
    """Per-row sum of token log-probs over predicted positions (<= 0)."""
    if logits.shape[:2] != target.ids.shape:
        raise ContractError("logits/target shape mismatch")
    keep = target.mask.clone()
    keep[:, 0] = False
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, target.ids.unsqueeze(-1)).squeeze(-1)
    return (picked * keep).sum(dim=1)


def pool_representation(h: HiddenStates) -> torch.Tensor:
    """Masked average pool: (batch, len, d) -> (batch, d)."""
    counts = h.mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ContractError("cannot pool a fully-masked row")
    weights = h.mask.to(h.values.dtype)
    return (h.values * weights.unsqueeze(-1)).sum(dim=1) / counts.unsqueeze(-1).to(h.values.dtype)


def _as_vector(x: "Representation | torch.Tensor") -> torch.Tensor:
    return x.z if isinstance(x, Representation) else x


def cosine_rows(z: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    """Cosine of one vector against each row of a matrix, shape (n,)."""
    z_norm = torch.linalg.vector_norm(z)
    row_norms = torch.linalg.vector_norm(rows, dim=-1)
    if float(z_norm.detach()) < COSINE_EPS or bool((row_norms.detach() < COSINE_EPS).any()):
        raise ContractError("cosine undefined for near-zero representation")
    return (rows @ z) / (row_norms * z_norm)


def cosine_similarity(a: "Representation | torch.Tensor", b: "Representation | torch.Tensor") -> float:
    """Cosine similarity of two representations, in [-1, 1]."""
    va, vb = _as_vector(a), _as_vector(b)
    return float(cosine_rows(va, vb.unsqueeze(0))[0])
