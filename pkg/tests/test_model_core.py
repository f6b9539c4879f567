"""Contracts and oracle checks for the transformer substrate."""

import math
import random

import numpy as np
import pytest
import torch

from contragen.data import PaddedBatch
from contragen.errors import ContractError, ValidationError
from contragen.model import (
    HiddenStates,
    ModelConfig,
    Representation,
    cosine_similarity,
    nll_loss,
    pool_representation,
)
from contragen.training import build_model
from contragen.vocab import BOS_ID, EOS_ID, PAD_ID

from conftest import random_source, random_target


class TestEncode:
    def test_shape_contract(self, tiny_model):
        batch = PaddedBatch.from_sequences([[4, 5, 6], [4, 5, 6, 7, 8]])
        enc = tiny_model.encode(batch)
        assert enc.values.shape == (2, 5, 32)
        assert torch.equal(enc.mask, batch.mask)

    def test_duplicate_rows_identical(self, tiny_model):
        batch = PaddedBatch.from_sequences([[4, 5, 6, 7], [4, 5, 6, 7]])
        enc = tiny_model.encode(batch)
        assert torch.equal(enc.values[0], enc.values[1])

    def test_batch_permutation(self, tiny_model):
        rows = [[4, 5, 6], [7, 8], [9, 10, 11, 4]]
        enc = tiny_model.encode(PaddedBatch.from_sequences(rows))
        perm = [2, 0, 1]
        enc_p = tiny_model.encode(PaddedBatch.from_sequences([rows[i] for i in perm]))
        for new_i, old_i in enumerate(perm):
            n = len(rows[old_i])
            assert torch.allclose(enc_p.values[new_i, :n], enc.values[old_i, :n], atol=1e-6)

    def test_out_of_range_id(self, tiny_model):
        batch = PaddedBatch.from_sequences([[4, 99]])
        with pytest.raises(ValidationError):
            tiny_model.encode(batch)

    def test_pad_does_not_leak(self, tiny_model):
        short = PaddedBatch.from_sequences([[4, 5, 6]])
        padded = PaddedBatch.from_sequences([[4, 5, 6], [4, 5, 6, 7, 8, 9]])
        enc_short = tiny_model.encode(short)
        enc_padded = tiny_model.encode(padded)
        assert torch.allclose(enc_short.values[0], enc_padded.values[0, :3], atol=1e-6)


class TestDecodeTeacherForced:
    def test_shape_contract(self, tiny_model):
        src = PaddedBatch.from_sequences([[4, 5]])
        tgt = PaddedBatch.from_sequences([[BOS_ID, 6, 7, EOS_ID]])
        enc = tiny_model.encode(src)
        h, logits = tiny_model.decode_teacher_forced(enc, tgt)
        assert logits.shape == (1, 4, 12)
        assert h.values.shape == (1, 4, 32)

    def test_causality(self, tiny_model):
        src = PaddedBatch.from_sequences([[4, 5, 6]])
        base_ids = [BOS_ID, 6, 7, 8, 9, EOS_ID]
        enc = tiny_model.encode(src)
        _, logits = tiny_model.decode_teacher_forced(
            enc, PaddedBatch.from_sequences([base_ids])
        )
        for t in range(1, len(base_ids) - 1):
            mutated = list(base_ids)
            mutated[t] = 10 if mutated[t] != 10 else 11
            _, logits_m = tiny_model.decode_teacher_forced(
                enc, PaddedBatch.from_sequences([mutated])
            )
            assert torch.allclose(logits_m[0, : t + 1], logits[0, : t + 1], atol=1e-6), t
            assert not torch.allclose(logits_m[0, t + 1], logits[0, t + 1], atol=1e-6)

    def test_batch_mismatch_raises(self, tiny_model):
        enc = tiny_model.encode(PaddedBatch.from_sequences([[4, 5]]))
        tgt = PaddedBatch.from_sequences([[BOS_ID, 6, EOS_ID], [BOS_ID, 7, EOS_ID]])
        with pytest.raises(ContractError):
            tiny_model.decode_teacher_forced(enc, tgt)

    def test_all_pad_beyond_bos(self, tiny_model):
        enc = tiny_model.encode(PaddedBatch.from_sequences([[4], [5, 6]]))
        tgt = PaddedBatch.from_sequences([[BOS_ID], [BOS_ID, 7, EOS_ID]])
        _, logits = tiny_model.decode_teacher_forced(enc, tgt)
        assert bool(torch.isfinite(logits[0, 0]).all())

    def test_must_start_with_bos(self, tiny_model):
        enc = tiny_model.encode(PaddedBatch.from_sequences([[4]]))
        with pytest.raises(ValidationError):
            tiny_model.decode_teacher_forced(enc, PaddedBatch.from_sequences([[6, 7]]))


class TestNllLoss:
    def test_perfect_prediction_zero(self):
        tgt = PaddedBatch.from_sequences([[BOS_ID, 5, 6, EOS_ID]])
        logits = torch.full((1, 4, 12), -1e9)
        for t in range(1, 4):
            logits[0, t, tgt.ids[0, t]] = 1e9
        assert float(nll_loss(logits, tgt)) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits_ln_v(self):
        tgt = PaddedBatch.from_sequences([[BOS_ID, 5, 6, EOS_ID], [BOS_ID, 7, EOS_ID]])
        logits = torch.zeros(2, 4, 12)
        assert float(nll_loss(logits, tgt)) == pytest.approx(math.log(12), abs=1e-6)

    def test_matches_numpy_cross_entropy(self):
        # batch 2, len 3 targets, vocab 5: independent scalar softmax oracle
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(2, 5, 5))
        seqs = [[BOS_ID, 4, 4, 4, EOS_ID], [BOS_ID, 4, 4, EOS_ID]]
        tgt = PaddedBatch.from_sequences(seqs)
        logits = torch.tensor(raw[:, : tgt.max_len, :], dtype=torch.float64)

        expected_terms = []
        for b, seq in enumerate(seqs):
            for t in range(1, len(seq)):
                row = raw[b, t]
                log_z = np.log(np.exp(row - row.max()).sum()) + row.max()
                expected_terms.append(-(row[seq[t]] - log_z))
        expected = float(np.mean(expected_terms))
        assert float(nll_loss(logits, tgt)) == pytest.approx(expected, abs=1e-6)

    def test_bounds_random(self):
        rng = random.Random(1)
        for _ in range(20):
            seqs = [random_target(rng, 12) for _ in range(3)]
            tgt = PaddedBatch.from_sequences(seqs)
            logits = torch.randn(3, tgt.max_len, 12)
            val = float(nll_loss(logits, tgt))
            assert val >= 0.0


class TestPooling:
    def test_single_position_identity(self):
        values = torch.randn(1, 3, 8)
        mask = torch.tensor([[True, False, False]])
        pooled = pool_representation(HiddenStates(values=values, mask=mask))
        assert torch.allclose(pooled[0], values[0, 0])

    def test_opposite_vectors_cancel(self):
        v = torch.randn(8)
        values = torch.stack([v, -v]).unsqueeze(0)
        mask = torch.ones(1, 2, dtype=torch.bool)
        pooled = pool_representation(HiddenStates(values=values, mask=mask))
        assert torch.allclose(pooled[0], torch.zeros(8), atol=1e-7)

    def test_hand_computed_mean(self):
        vs = [torch.tensor([1.0, 2.0]), torch.tensor([3.0, -4.0]), torch.tensor([-1.0, 5.0])]
        values = torch.stack(vs).unsqueeze(0)
        mask = torch.ones(1, 3, dtype=torch.bool)
        pooled = pool_representation(HiddenStates(values=values, mask=mask))
        assert torch.allclose(pooled[0], torch.tensor([1.0, 1.0]), atol=1e-7)

    def test_pad_positions_ignored(self, tiny_model):
        rows = [[4, 5, 6, 7]]
        enc = tiny_model.encode(PaddedBatch.from_sequences(rows))
        enc_padded = tiny_model.encode(PaddedBatch.from_sequences([rows[0], [4] * 7]))
        a = pool_representation(enc)[0]
        sub = HiddenStates(values=enc_padded.values[:1], mask=enc_padded.mask[:1])
        b = pool_representation(sub)[0]
        assert torch.allclose(a, b, atol=1e-6)

    def test_fully_masked_row_raises(self):
        values = torch.randn(1, 2, 4)
        mask = torch.zeros(1, 2, dtype=torch.bool)
        with pytest.raises(ContractError):
            pool_representation(HiddenStates(values=values, mask=mask))


class TestCosine:
    def test_self_similarity_one(self):
        z = Representation.from_vector(torch.randn(16))
        assert cosine_similarity(z, z) == pytest.approx(1.0, abs=1e-6)

    def test_antipodal_minus_one(self):
        v = torch.randn(16)
        a = Representation.from_vector(v)
        b = Representation.from_vector(-v)
        assert cosine_similarity(a, b) == pytest.approx(-1.0, abs=1e-6)

    def test_scale_invariance(self):
        rng = random.Random(3)
        for _ in range(20):
            v1 = torch.randn(8)
            v2 = torch.randn(8)
            c = rng.uniform(0.01, 100.0)
            base = cosine_similarity(v1, v2)
            scaled = cosine_similarity(v1 * c, v2)
            assert scaled == pytest.approx(base, abs=1e-7)

    def test_near_zero_norm_raises(self):
        with pytest.raises(ContractError):
            cosine_similarity(torch.zeros(4), torch.ones(4))


class TestGradientCheck:
    def test_nll_grad_matches_finite_differences(self):
        cfg = ModelConfig(
            d_model=8, n_layers=2, n_heads=2, ffn_dim=16,
            dropout_rate=0.0, vocab_size=10, max_len=16,
        )
        model = build_model(cfg, seed=11).double()
        model.train()
        src = PaddedBatch.from_sequences([[4, 5, 6], [7, 8]])
        tgt = PaddedBatch.from_sequences([[BOS_ID, 4, 5, EOS_ID], [BOS_ID, 6, EOS_ID]])

        def loss_fn():
            enc = model.encode(src)
            _, logits = model.decode_teacher_forced(enc, tgt)
            return nll_loss(logits, tgt)

        loss = loss_fn()
        model.zero_grad()
        loss.backward()

        params = [p for p in model.parameters() if p.requires_grad]
        rng = random.Random(5)
        h = 1e-4
        checked = 0
        for _ in range(30):
            p = params[rng.randrange(len(params))]
            idx = rng.randrange(p.numel())
            analytic = float(p.grad.reshape(-1)[idx])
            with torch.no_grad():
                flat = p.reshape(-1)
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(loss_fn())
                flat[idx] = orig - h
                down = float(loss_fn())
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            assert abs(analytic - numeric) / scale <= 1e-3, (analytic, numeric)
            checked += 1
        assert checked == 30
