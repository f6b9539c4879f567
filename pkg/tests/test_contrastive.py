"""Oracle scoring, ranking, pair construction, and loss checks."""

import math
import random
from collections import Counter

import pytest
import torch

from contragen.contrastive import (
    ContrastivePairs,
    OracleConfig,
    batch_oracle_scores,
    build_pairs,
    infonce_loss,
    npairs_loss,
    oracle_score,
    rank_candidates,
)
from contragen.decoding import Candidate, CandidateSet
from contragen.errors import ContractError
from contragen.vocab import BOS_ID, EOS_ID, PAD_ID


def reference_sentence_bleu(cand, ref, max_ngram=4, k=1.0):
    """Independent scalar smoothed sentence score, written from scratch
    against the documented definition (add-k above order 1, brevity
    penalty, unigram miss scores 0)."""
    cand = [t for t in cand if t not in (PAD_ID, BOS_ID, EOS_ID)]
    ref = [t for t in ref if t not in (PAD_ID, BOS_ID, EOS_ID)]
    if not cand or not ref:
        return 0.0
    orders = min(max_ngram, len(cand))
    logs = []
    for n in range(1, orders + 1):
        c_grams = [tuple(cand[i: i + n]) for i in range(len(cand) - n + 1)]
        r_grams = [tuple(ref[i: i + n]) for i in range(len(ref) - n + 1)]
        r_counts = Counter(r_grams)
        clipped = 0
        seen = Counter()
        for g in c_grams:
            seen[g] += 1
            if seen[g] <= r_counts[g]:
                clipped += 1
        if n == 1:
            if clipped == 0:
                return 0.0
            logs.append(math.log(clipped / len(c_grams)))
        else:
            logs.append(math.log((clipped + k) / (len(c_grams) + k)))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / orders)


def frame(tokens):
    return [BOS_ID] + list(tokens) + [EOS_ID]


def pad_matrix(rows):
    width = max(len(r) for r in rows)
    mat = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, r in enumerate(rows):
        mat[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return mat


class TestOracleScore:
    def test_identity_is_one(self):
        rng = random.Random(0)
        for _ in range(10):
            y = frame([rng.randint(4, 19) for _ in range(rng.randint(4, 12))])
            assert oracle_score(y, y) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_vocab_is_zero(self):
        a = frame([4, 5, 6, 7])
        b = frame([10, 11, 12, 13])
        assert oracle_score(a, b) == 0.0

    def test_hand_case_against_reference(self):
        # candidate "a b c d" vs reference "a b c e"
        cand = frame([4, 5, 6, 7])
        ref = frame([4, 5, 6, 8])
        got = oracle_score(cand, ref)
        want = reference_sentence_bleu(cand, ref)
        assert got == pytest.approx(want, abs=1e-9)
        # the reference value, spelled out: p1=3/4, p2=3/4, p3=2/3, p4=1/2
        explicit = (0.75 * 0.75 * (2 / 3) * 0.5) ** 0.25
        assert got == pytest.approx(explicit, abs=1e-9)

    def test_random_cases_against_reference(self):
        rng = random.Random(42)
        for _ in range(200):
            cand = frame([rng.randint(4, 12) for _ in range(rng.randint(1, 14))])
            ref = frame([rng.randint(4, 12) for _ in range(rng.randint(1, 14))])
            assert oracle_score(cand, ref) == pytest.approx(
                reference_sentence_bleu(cand, ref), abs=1e-9
            )

    def test_empty_stripped_scores_zero(self):
        assert oracle_score([BOS_ID, EOS_ID], frame([4, 5])) == 0.0


class TestBatchOracle:
    def test_single_row_reduces_to_scalar(self):
        cand = frame([4, 5, 6])
        ref = frame([4, 5, 7])
        got = batch_oracle_scores(pad_matrix([cand]), ref)
        assert float(got[0]) == pytest.approx(oracle_score(cand, ref), abs=1e-12)

    def test_loop_equivalence_random(self):
        rng = random.Random(7)
        for _ in range(40):
            n = rng.randint(1, 16)
            cands = [
                frame([rng.randint(4, 23) for _ in range(rng.randint(1, 15))])
                for _ in range(n)
            ]
            ref = frame([rng.randint(4, 23) for _ in range(rng.randint(1, 15))])
            batch = batch_oracle_scores(pad_matrix(cands), ref)
            for i, c in enumerate(cands):
                assert float(batch[i]) == pytest.approx(oracle_score(c, ref), abs=1e-9)

    def test_all_identical_to_reference(self):
        ref = frame([4, 5, 6, 7, 8])
        scores = batch_oracle_scores(pad_matrix([ref] * 5), ref)
        assert torch.allclose(scores, torch.ones(5, dtype=torch.float64))


def make_candidate(tokens, ll=-1.0, lp=None):
    return Candidate(
        ids=frame(tokens),
        log_likelihood=ll,
        length_penalized_score=ll / max(len(tokens), 1) if lp is None else lp,
    )


class TestRankCandidates:
    def test_hand_ranked_order(self):
        ref = frame([4, 5, 6, 7, 8, 9])
        # oracle scores (vs ref): mid, high, low by construction
        cands = [
            make_candidate([4, 5, 10, 11, 12, 13]),   # 2/6 unigrams
            make_candidate([4, 5, 6, 7, 8, 13]),      # 5/6 unigrams, long overlaps
            make_candidate([4, 10, 11, 12, 13, 14]),  # 1/6 unigrams
        ]
        ranked = rank_candidates(CandidateSet(candidates=cands), ref)
        assert [c.rank for c in ranked.candidates] == [0, 1, 2, 3]
        assert ranked.candidates[0].is_ground_truth
        assert ranked.ground_truth_index == 0
        scores = [c.oracle_score for c in ranked.candidates]
        assert scores == sorted(scores, reverse=True)
        assert ranked.candidates[1].ids == frame([4, 5, 6, 7, 8, 13])

    def test_zero_scores_tie_break_by_likelihood(self):
        ref = frame([4, 5, 6])
        cands = [
            make_candidate([10, 11], ll=-5.0),
            make_candidate([12, 13], ll=-1.0),
            make_candidate([14, 15], ll=-3.0),
        ]
        ranked = rank_candidates(CandidateSet(candidates=cands), ref)
        tail = ranked.candidates[1:]
        assert [c.ids for c in tail] == [frame([12, 13]), frame([14, 15]), frame([10, 11])]

    def test_duplicate_of_truth_ranks_second(self):
        ref = frame([4, 5, 6, 7])
        dup = make_candidate([4, 5, 6, 7], ll=-0.1)
        ranked = rank_candidates(CandidateSet(candidates=[dup]), ref)
        assert ranked.candidates[0].is_ground_truth
        assert ranked.candidates[1].oracle_score == pytest.approx(1.0)


class TestBuildPairs:
    def test_pair_count_choose_two(self):
        ref = frame([4, 5, 6])
        cands = [make_candidate([4 + i, 5, 6], ll=-float(i + 1)) for i in range(3)]
        ranked = rank_candidates(CandidateSet(candidates=cands), ref)
        pairs = build_pairs(ranked, gamma=0.01)
        assert len(pairs) == 6  # C(4, 2)

    def test_margin_rule(self):
        ref = frame([4, 5, 6])
        cands = [make_candidate([4 + i, 5, 6], ll=-float(i + 1)) for i in range(3)]
        ranked = rank_candidates(CandidateSet(candidates=cands), ref)
        pairs = build_pairs(ranked, gamma=0.01)
        for p, n, xi in zip(pairs.pos_indices, pairs.neg_indices, pairs.margins):
            assert float(xi) == pytest.approx(0.01 * (int(n) - int(p)), abs=1e-12)
            assert int(p) < int(n)
        lookup = {
            (int(p), int(n)): float(x)
            for p, n, x in zip(pairs.pos_indices, pairs.neg_indices, pairs.margins)
        }
        assert lookup[(0, 1)] == pytest.approx(0.01)
        assert lookup[(0, 3)] == pytest.approx(0.03)

    def test_single_item_no_pairs(self):
        only = make_candidate([4, 5])
        only.rank = 0
        ranked = CandidateSet(candidates=[only], ground_truth_index=None)
        assert len(build_pairs(ranked, 0.01)) == 0

    def test_unranked_set_rejected(self):
        cands = [make_candidate([4, 5]), make_candidate([6, 7])]
        with pytest.raises(ContractError):
            build_pairs(CandidateSet(candidates=cands), 0.01)


def pairs_of(pos, neg, margins):
    return ContrastivePairs(
        pos_indices=torch.tensor(pos, dtype=torch.long),
        neg_indices=torch.tensor(neg, dtype=torch.long),
        margins=torch.tensor(margins, dtype=torch.get_default_dtype()),
    )


def reps_with_cosines(z_x, cosines):
    """Vectors in the plane of z_x with prescribed cosine to it."""
    d = z_x.shape[0]
    unit = z_x / torch.linalg.vector_norm(z_x)
    other = torch.zeros(d)
    other[1] = 1.0
    other = other - (other @ unit) * unit
    other = other / torch.linalg.vector_norm(other)
    rows = []
    for c in cosines:
        rows.append(c * unit + math.sqrt(max(0.0, 1 - c * c)) * other)
    return torch.stack(rows)


class TestNpairsLoss:
    def test_satisfied_pair_is_zero(self):
        z_x = torch.tensor([1.0, 0.0, 0.0, 0.0])
        reps = reps_with_cosines(z_x, [0.9, 0.2])
        loss = npairs_loss(z_x, reps, pairs_of([0], [1], [0.01]))
        assert float(loss) == pytest.approx(0.0, abs=1e-7)

    def test_violated_pair_value(self):
        z_x = torch.tensor([1.0, 0.0, 0.0, 0.0])
        reps = reps_with_cosines(z_x, [0.2, 0.9])
        loss = npairs_loss(z_x, reps, pairs_of([0], [1], [0.02]))
        assert float(loss) == pytest.approx(0.72, abs=1e-6)

    def test_identical_reps_sum_of_margins(self):
        z_x = torch.randn(6)
        rep = torch.randn(6)
        reps = torch.stack([rep] * 4)
        margins = [0.01, 0.02, 0.03, 0.01, 0.02, 0.01]
        loss = npairs_loss(z_x, reps, pairs_of([0, 0, 0, 1, 1, 2], [1, 2, 3, 2, 3, 3], margins))
        assert float(loss) == pytest.approx(sum(margins), abs=1e-6)

    def test_brute_force_enumeration(self):
        rng = random.Random(9)
        torch.manual_seed(9)
        for _ in range(50):
            n = rng.randint(2, 8)
            d = rng.randint(2, 16)
            z_x = torch.randn(d)
            reps = torch.randn(n, d)
            gamma = 0.01
            pos, neg, margins = [], [], []
            for i in range(n):
                for j in range(i + 1, n):
                    pos.append(i)
                    neg.append(j)
                    margins.append(gamma * (j - i))
            loss = float(npairs_loss(z_x, reps, pairs_of(pos, neg, margins)))

            def cos(a, b):
                num = sum(x * y for x, y in zip(a.tolist(), b.tolist()))
                na = math.sqrt(sum(x * x for x in a.tolist()))
                nb = math.sqrt(sum(x * x for x in b.tolist()))
                return num / (na * nb)

            expected = 0.0
            for i in range(n):
                for j in range(i + 1, n):
                    expected += max(0.0, cos(z_x, reps[j]) - cos(z_x, reps[i]) + gamma * (j - i))
            assert loss == pytest.approx(expected, abs=1e-5)

    def test_nonnegative_and_scale_invariant(self):
        torch.manual_seed(3)
        z_x = torch.randn(8)
        reps = torch.randn(4, 8)
        pairs = pairs_of([0, 0, 1], [1, 2, 2], [0.01, 0.02, 0.01])
        base = float(npairs_loss(z_x, reps, pairs))
        assert base >= 0.0
        scaled = float(npairs_loss(z_x, reps * 7.3, pairs))
        assert scaled == pytest.approx(base, abs=1e-6)


class TestInfoNCELoss:
    def test_equal_similarities_ln_n(self):
        z_x = torch.tensor([1.0, 0.0, 0.0])
        reps = reps_with_cosines(z_x, [0.5, 0.5, 0.5, 0.5])
        loss = infonce_loss(z_x, reps[0], reps[1:], tau=0.7)
        assert float(loss) == pytest.approx(math.log(4), abs=1e-6)

    def test_small_tau_dominant_positive(self):
        z_x = torch.tensor([1.0, 0.0, 0.0])
        reps = reps_with_cosines(z_x, [0.9, 0.1, 0.2])
        loss = infonce_loss(z_x, reps[0], reps[1:], tau=0.01)
        assert float(loss) == pytest.approx(0.0, abs=1e-6)

    def test_hand_computed_value(self):
        z_x = torch.tensor([1.0, 0.0, 0.0])
        reps = reps_with_cosines(z_x, [0.8, 0.1, 0.3])
        loss = infonce_loss(z_x, reps[0], reps[1:], tau=1.0)
        expected = -math.log(math.exp(0.8) / (math.exp(0.8) + math.exp(0.1) + math.exp(0.3)))
        assert float(loss) == pytest.approx(expected, abs=1e-7)

    def test_empty_negatives_zero(self):
        z_x = torch.randn(4)
        z_pos = torch.randn(4)
        assert float(infonce_loss(z_x, z_pos, torch.empty(0, 4), tau=1.0)) == 0.0

    def test_monotonic_in_positive_similarity(self):
        z_x = torch.tensor([1.0, 0.0, 0.0])
        negs = reps_with_cosines(z_x, [0.4, -0.2])
        values = []
        for c in (-0.5, 0.0, 0.5, 0.9):
            pos = reps_with_cosines(z_x, [c])[0]
            values.append(float(infonce_loss(z_x, pos, negs, tau=0.5)))
        assert values == sorted(values, reverse=True)


class TestLossGradients:
    def _fd_check(self, loss_fn, tensors, n_coords=20, h=1e-4):
        for tensor in tensors:
            tensor.requires_grad_(True)
        loss = loss_fn()
        grads = torch.autograd.grad(loss, tensors)
        rng = random.Random(13)
        for tensor, grad in zip(tensors, grads):
            flat = tensor.detach().reshape(-1)
            gflat = grad.reshape(-1)
            for _ in range(n_coords):
                idx = rng.randrange(flat.numel())
                orig = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = float(loss_fn())
                    flat[idx] = orig - h
                    down = float(loss_fn())
                    flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = float(gflat[idx])
                scale = max(abs(analytic), abs(numeric), 1e-6)
                assert abs(analytic - numeric) / scale <= 1e-3, (analytic, numeric)

    def test_npairs_gradient(self):
        torch.manual_seed(21)
        z_x = torch.randn(8, dtype=torch.float64)
        reps = torch.randn(5, 8, dtype=torch.float64)
        pos, neg, margins = [], [], []
        for i in range(5):
            for j in range(i + 1, 5):
                pos.append(i)
                neg.append(j)
                margins.append(0.01 * (j - i))
        all_pairs = pairs_of(pos, neg, margins)
        with torch.no_grad():
            from contragen.model import cosine_rows

            cos = cosine_rows(z_x, reps)
            args = cos[all_pairs.neg_indices] - cos[all_pairs.pos_indices] + all_pairs.margins.double()
        safe = (args.abs() > 1e-3).nonzero().flatten()
        pairs = ContrastivePairs(
            pos_indices=all_pairs.pos_indices[safe],
            neg_indices=all_pairs.neg_indices[safe],
            margins=all_pairs.margins[safe],
        )
        self._fd_check(lambda: npairs_loss(z_x, reps, pairs), [z_x, reps])

    def test_infonce_gradient(self):
        torch.manual_seed(22)
        z_x = torch.randn(8, dtype=torch.float64)
        z_pos = torch.randn(8, dtype=torch.float64)
        negs = torch.randn(4, 8, dtype=torch.float64)
        self._fd_check(lambda: infonce_loss(z_x, z_pos, negs, tau=0.7), [z_x, z_pos, negs])
