import math

import numpy as np
import pytest

import glyphgraph.tensor as T
from glyphgraph import losses
from glyphgraph.errors import DataError, DivergenceError

import oracles


@pytest.fixture
def rng():
    return np.random.default_rng(500)


class TestLossChar:
    def test_confident_correct_limit(self):
        logits = T.const([[40.0, 0.0, 0.0]])
        assert losses.loss_char(logits, 0).item() < 1e-12

    def test_uniform_is_log_classes(self):
        logits = T.const([[0.0] * 7])
        assert losses.loss_char(logits, 3).item() == pytest.approx(math.log(7), abs=1e-12)

    def test_matches_direct_formula(self, rng):
        raw = rng.uniform(-3, 3, 9)
        got = losses.loss_char(T.const([raw]), 4).item()
        assert got == pytest.approx(oracles.cross_entropy(raw.tolist(), 4), abs=1e-12)

    def test_out_of_vocab_rejected(self):
        with pytest.raises(DataError, match="outside vocabulary"):
            losses.loss_char(T.const([[0.0, 0.0]]), 5)


class TestMatching:
    def test_iou_matches_oracle(self, rng):
        for _ in range(50):
            a = sorted(rng.uniform(0, 1, 2))
            b = sorted(rng.uniform(0, 1, 2))
            c = sorted(rng.uniform(0, 1, 2))
            d = sorted(rng.uniform(0, 1, 2))
            box_a = (a[0], b[0], a[1], b[1])
            box_b = (c[0], d[0], c[1], d[1])
            assert losses.iou(box_a, box_b) == pytest.approx(oracles.iou(box_a, box_b), abs=1e-12)

    def test_greedy_matching_prefers_best(self):
        preds = [(0.0, 0.0, 0.5, 0.5), (0.5, 0.5, 1.0, 1.0)]
        gts = [(0.05, 0.05, 0.5, 0.5), (0.55, 0.55, 1.0, 1.0)]
        pairs, unmatched = losses.match_components(preds, gts, threshold=0.3)
        assert sorted(pairs) == [(0, 0), (1, 1)]
        assert unmatched == 0

    def test_gt_without_bbox_is_unmatched(self):
        pairs, unmatched = losses.match_components([(0, 0, 1, 1)], [None, (0.0, 0.0, 1.0, 1.0)])
        assert pairs == [(0, 1)]
        assert unmatched == 1


class TestLossComp:
    def test_zero_components_zero_loss(self):
        out = losses.loss_comp(T.zeros((0, 4)), [], [], 0, 4)
        assert out.item() == 0.0

    def test_confident_matches_vanish(self):
        logits = T.const([[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]])
        out = losses.loss_comp(logits, [(0, 0), (1, 1)], [0, 1], 0, 3)
        assert out.item() < 1e-12

    def test_two_component_fixture_matches_hand_sum(self, rng):
        raw = rng.uniform(-2, 2, (2, 5))
        labels = [3, 1]
        out = losses.loss_comp(T.const(raw), [(0, 0), (1, 1)], labels, 1, 5)
        expect = (
            oracles.cross_entropy(raw[0].tolist(), 3)
            + oracles.cross_entropy(raw[1].tolist(), 1)
            + math.log(5)
        )
        assert out.item() == pytest.approx(expect, abs=1e-12)


class TestLossStruct:
    def test_self_consistency_is_zero(self, rng):
        h = rng.uniform(-1, 1, (4, 6))
        stored = T.const(h)
        recomputed = T.const(h.copy())
        a = rng.uniform(0, 1, (2, 2))
        term, skipped = losses.loss_struct(recomputed, stored, T.const(a), a.copy(), beta=0.1)
        assert term.item() == 0.0
        assert not skipped

    def test_beta_zero_removes_adjacency_term(self, rng):
        h0 = rng.uniform(-1, 1, (3, 4))
        h1 = rng.uniform(-1, 1, (3, 4))
        a_pred = T.const(rng.uniform(0, 1, (2, 2)))
        a_true = np.ones((2, 2))
        with_adj, _ = losses.loss_struct(T.const(h0), T.const(h1), a_pred, a_true, beta=0.5)
        without, _ = losses.loss_struct(T.const(h0), T.const(h1), a_pred, a_true, beta=0.0)
        frob = ((h0 - h1) ** 2).sum()
        assert without.item() == pytest.approx(frob, abs=1e-12)
        assert with_adj.item() > without.item()

    def test_missing_adjacency_skips_with_flag(self, rng):
        h0, h1 = rng.uniform(-1, 1, (2, 3)), rng.uniform(-1, 1, (2, 3))
        term, skipped = losses.loss_struct(T.const(h0), T.const(h1), None, None, beta=0.1)
        assert skipped

    def test_three_component_fixture_matches_scripted_evaluation(self, rng):
        h_prev = rng.uniform(-1, 1, (3, 4))
        h_next = rng.uniform(-1, 1, (3, 4))
        a_pred = rng.uniform(0, 1, (3, 3))
        a_true = (rng.uniform(0, 1, (3, 3)) > 0.5).astype(float)
        beta = 0.25
        term, _ = losses.loss_struct(T.const(h_prev), T.const(h_next), T.const(a_pred), a_true, beta)
        frob = sum(
            (h_prev[i][j] - h_next[i][j]) ** 2 for i in range(3) for j in range(4)
        )
        l1 = sum(abs(a_true[i][j] - a_pred[i][j]) for i in range(3) for j in range(3))
        assert term.item() == pytest.approx(frob + beta * l1, abs=1e-12)

    def test_stored_side_carries_no_gradient(self, rng):
        stored = T.const(rng.uniform(-1, 1, (2, 3)))
        recomputed_base = rng.uniform(-1, 1, (2, 3))
        x = T.const(recomputed_base)
        with T.tape() as tp:
            tp.watch(x)
            tp.watch(stored)
            term, _ = losses.loss_struct(x, stored, None, None, beta=0.0)
            tp.backward(term)
        assert x.grad is not None
        assert stored.grad is None  # detached: the stored features are a constant


class TestLossSem:
    def test_zero_logits_give_n_log_two(self):
        out = losses.loss_sem(T.zeros((6, 1)), np.zeros(6))
        assert out.item() == pytest.approx(6 * math.log(2), abs=1e-12)

    def test_confident_correct_vanishes(self):
        logits = T.const([[40.0], [-40.0], [40.0]])
        out = losses.loss_sem(logits, np.array([1.0, 0.0, 1.0]))
        assert out.item() < 1e-12

    def test_five_concept_fixture_matches_direct_sum(self, rng):
        raw = rng.uniform(-3, 3, 5)
        active = (rng.uniform(0, 1, 5) > 0.4).astype(float)
        out = losses.loss_sem(T.const(raw.reshape(-1, 1)), active)
        expect = sum(
            oracles.binary_cross_entropy_with_logit(z, y) for z, y in zip(raw, active)
        )
        assert out.item() == pytest.approx(expect, abs=1e-12)


class TestLossTotal:
    def _parts(self, values):
        return {name: T.const([[v]]) for name, v in zip(("char", "comp", "struct", "sem"), values)}

    def test_char_only(self):
        w = losses.LossWeights(char=1.0, comp=0.0, struct=0.0, sem=0.0)
        total = losses.loss_total(self._parts([2.5, 9.0, 8.0, 7.0]), w)
        assert total.item() == 2.5

    def test_all_zero(self):
        total = losses.loss_total(self._parts([0, 0, 0, 0]), losses.LossWeights())
        assert total.item() == 0.0

    def test_weighted_sum_identity_random(self, rng):
        for _ in range(100):
            vals = rng.uniform(0, 5, 4)
            ws = rng.uniform(0, 2, 5)
            w = losses.LossWeights(char=ws[0], comp=ws[1], struct=ws[2], sem=ws[3], beta=ws[4])
            total = losses.loss_total(self._parts(vals), w)
            expect = (vals * ws[:4]).sum()
            assert abs(total.item() - expect) < 1e-12

    def test_nonfinite_part_names_term(self):
        parts = self._parts([1.0, float("nan"), 0.0, 0.0])
        with pytest.raises(DivergenceError, match="'comp'"):
            losses.loss_total(parts, losses.LossWeights())
