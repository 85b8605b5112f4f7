"""
Tests for the CE, CPS and CPD objectives and their combination.
"""
import math

import numpy as np
import pytest

from cpft.conformal import PredictionSet
from cpft.core import EmptyBatch, NonPositiveTau, ShapeMismatch, ZeroNormEmbedding
from cpft.losses import (
    LossValue,
    ce_loss,
    cpd_distance,
    cpd_loss,
    cpft_loss,
    cps_hard,
    cps_proxy,
    top_k_closest,
)
from cpft.model import GradientBundle, ScoreVector, backward_batch, collate, forward, init_params, softmax

EPS = 1e-6


def scores_of(relevance):
    relevance = np.asarray(relevance, dtype=np.float64)
    return ScoreVector(relevance, softmax(relevance))


def fd_relevance(loss_fn, relevance):
    """Central differences of a scalar function of a relevance array."""
    grad = np.zeros_like(relevance)
    for index in np.ndindex(relevance.shape):
        up, down = relevance.copy(), relevance.copy()
        up[index] += EPS
        down[index] -= EPS
        grad[index] = (loss_fn(up) - loss_fn(down)) / (2 * EPS)
    return grad


def unit(deg):
    rad = math.radians(deg)
    return np.array([math.cos(rad), math.sin(rad)])


class TestCrossEntropy:

    def test_uniform(self):
        assert ce_loss(scores_of(np.zeros(4)), 1).value == pytest.approx(math.log(4))

    def test_known_values(self):
        loss = ce_loss(scores_of([1.0, 2.0, 3.0]), 2)
        assert loss.value == pytest.approx(0.4076, abs=1e-4)
        np.testing.assert_allclose(loss.grad_relevance, [0.0900, 0.2447, -0.3348], atol=1e-4)

    def test_near_perfect_prediction(self):
        assert ce_loss(scores_of([0.0, 50.0, 0.0]), 1).value == pytest.approx(0.0, abs=1e-20)

    def test_batch_is_mean_and_rows_sum_to_zero(self, rng):
        rel = rng.normal(size=(5, 7))
        targets = rng.integers(7, size=5)
        loss = ce_loss(scores_of(rel), targets)
        singles = [ce_loss(scores_of(rel[i]), targets[i]).value for i in range(5)]
        assert loss.value == pytest.approx(np.mean(singles))
        np.testing.assert_allclose(loss.grad_relevance.sum(axis=1), 0.0, atol=1e-9)
        assert loss.value >= 0

    def test_target_count_checked(self):
        with pytest.raises(ShapeMismatch):
            ce_loss(scores_of(np.zeros((2, 3))), [0])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        rel = rng.normal(size=(3, int(rng.integers(3, 13))))
        targets = rng.integers(rel.shape[1], size=3)
        analytic = ce_loss(scores_of(rel), targets).grad_relevance
        numeric = fd_relevance(lambda r: ce_loss(scores_of(r), targets).value, rel)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


class TestCPSHard:

    @pytest.mark.parametrize("sizes,expected", [((3, 5), 4.0), ((1, 1, 1), 1.0), ((1, 2, 3, 4), 2.5)])
    def test_mean_size(self, sizes, expected):
        sets = [PredictionSet(user=i, members=tuple(range(n))) for i, n in enumerate(sizes)]
        assert cps_hard(sets) == expected

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            cps_hard([])


class TestCPSProxy:

    def test_scores_at_threshold(self):
        s = np.full((2, 6), 0.4)
        assert cps_proxy(s, q_hat=0.4, tau=0.1).value == pytest.approx(3.0)

    def test_non_positive_tau(self):
        with pytest.raises(NonPositiveTau):
            cps_proxy(np.full((1, 3), 0.5), q_hat=0.5, tau=0.0)

    def test_close_to_hard_count_at_small_tau(self, rng):
        q_hat = 0.5
        s = rng.uniform(0.0, 1.0, size=(4, 10))
        # keep every score at least 10 * tau away from q_hat
        s = np.where(s < q_hat, np.minimum(s, q_hat - 0.01), np.maximum(s, q_hat + 0.01))
        hard = (s <= q_hat).sum(axis=1)
        for row in range(4):
            assert abs(cps_proxy(s[row:row + 1], q_hat, 1e-3).value - hard[row]) < 0.01

    def test_error_shrinks_with_tau(self, rng):
        q_hat = 0.5
        s = np.where(rng.random(size=(3, 8)) < 0.5, 0.0, 1.0)
        hard = float((s <= q_hat).sum(axis=1).mean())
        errors = [abs(cps_proxy(s, q_hat, tau).value - hard) for tau in (1e-1, 1e-2, 1e-3)]
        assert errors[0] >= errors[1] >= errors[2]
        assert errors[0] > errors[2]
        assert errors[2] < 0.01

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        rel = rng.normal(size=(2, int(rng.integers(3, 13))))
        s = 1.0 - softmax(rel)
        q_hat = float(np.median(s))
        tau = 0.05
        analytic = cps_proxy(s, q_hat, tau).grad_relevance
        numeric = fd_relevance(lambda r: cps_proxy(1.0 - softmax(r), q_hat, tau).value, rel)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


class TestCPSProxyWithTruths:
    """The true item counts toward the set size but is never pushed out of it."""

    def test_value_unchanged(self, rng):
        s = 1.0 - softmax(rng.normal(size=(3, 7)))
        truths = [0, 4, 6]
        q_hat = float(np.median(s))
        assert cps_proxy(s, q_hat, 0.05, truths=truths).value == cps_proxy(s, q_hat, 0.05).value

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_holds_truth_membership_constant(self, seed):
        rng = np.random.default_rng(seed)
        n_rows, n_items = 2, int(rng.integers(3, 13))
        rel = rng.normal(size=(n_rows, n_items))
        truths = rng.integers(n_items, size=n_rows)
        s0 = 1.0 - softmax(rel)
        q_hat = float(np.median(s0))
        tau = 0.05
        rows = np.arange(n_rows)

        def others(r):
            s = 1.0 - softmax(r)
            # far above q_hat: the truth contributes nothing that moves
            s[rows, truths] = 1e6
            return cps_proxy(s, q_hat, tau).value

        analytic = cps_proxy(s0, q_hat, tau, truths=truths).grad_relevance
        np.testing.assert_allclose(analytic, fd_relevance(others, rel), rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_truth_is_never_pushed_down(self, seed):
        rng = np.random.default_rng(seed)
        rel = rng.normal(size=(4, 9)) * 2.0
        truths = rng.integers(9, size=4)
        s = 1.0 - softmax(rel)
        grad = cps_proxy(s, float(np.quantile(s, 0.3)), 0.05, truths=truths).grad_relevance
        # descent moves relevance along -grad, so a non-positive entry never lowers the truth
        assert np.all(grad[np.arange(4), truths] <= 1e-15)

    def test_truths_must_match_rows(self):
        with pytest.raises(ShapeMismatch):
            cps_proxy(np.full((2, 4), 0.5), q_hat=0.5, tau=0.1, truths=[0])


class TestTopKClosest:

    def test_truth_first(self):
        emb = np.array([unit(0), unit(30), unit(90), unit(180)])
        chosen = top_k_closest(PredictionSet(user=0, members=(0, 1, 2, 3)), emb[1], emb, k=1)
        assert chosen == [1]

    def test_all_members_sorted_when_k_large(self):
        emb = np.array([unit(0), unit(30), unit(90), unit(180)])
        chosen = top_k_closest(PredictionSet(user=0, members=(0, 2, 3)), emb[1], emb, k=10)
        assert chosen == [0, 2, 3]

    def test_ties_prefer_lower_id(self):
        emb = np.array([unit(10), unit(-10), unit(0)])
        chosen = top_k_closest(PredictionSet(user=0, members=(0, 1)), emb[2], emb, k=2)
        assert chosen == [0, 1]

    def test_empty_set(self):
        assert top_k_closest(PredictionSet(user=0, members=()), np.ones(2), np.ones((3, 2)), k=3) == []

    def test_matches_sort_oracle(self, rng):
        emb = rng.normal(size=(12, 4))
        members = (1, 3, 4, 7, 11)
        truth = emb[5]
        cos = {m: emb[m] @ truth / (np.linalg.norm(emb[m]) * np.linalg.norm(truth)) for m in members}
        oracle = sorted(members, key=lambda m: (-cos[m], m))[:3]
        assert top_k_closest(PredictionSet(user=0, members=members), truth, emb, k=3) == oracle

    def test_zero_norm(self):
        emb = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ZeroNormEmbedding):
            top_k_closest(PredictionSet(user=0, members=(0, 1)), emb[1], emb, k=1)


class TestCPD:

    def test_identical_members(self):
        emb = np.array([unit(0), unit(0), unit(45)])
        loss = cpd_loss([(PredictionSet(user=0, members=(0, 1)), 0)], emb, k=2)
        assert loss.value == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_member(self):
        emb = np.array([unit(0), unit(90)])
        assert cpd_distance([[1]], [0], emb, k=1).value == pytest.approx(1.0)

    def test_hand_placed_angles(self):
        emb = np.array([unit(0), unit(60), unit(170)])
        loss = cpd_loss([(PredictionSet(user=0, members=(0, 1, 2)), 0)], emb, k=2)
        assert loss.value == pytest.approx(0.25)
        assert set(loss.grad_embeddings) == {0, 1}

    def test_bounds(self, rng):
        emb = rng.normal(size=(10, 3))
        batch = [(PredictionSet(user=i, members=tuple(range(10))), i) for i in range(4)]
        assert 0.0 <= cpd_loss(batch, emb, k=10).value <= 2.0

    def test_frozen_truth_gets_no_gradient(self):
        emb = np.array([unit(0), unit(60)])
        loss = cpd_distance([[1]], [0], emb, k=1, freeze_truth=True)
        assert set(loss.grad_embeddings) == {1}

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(int(rng.integers(5, 13)), int(rng.integers(2, 9))))
        n = emb.shape[0]
        selections = [list(rng.choice(n, size=3, replace=False)) for _ in range(2)]
        truths = [int(t) for t in rng.integers(n, size=2)]
        loss = cpd_distance(selections, truths, emb, k=3)
        analytic = np.zeros_like(emb)
        for item, g in loss.grad_embeddings.items():
            analytic[item] += g
        numeric = fd_relevance(lambda e: cpd_distance(selections, truths, e, k=3).value, emb)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


class TestCPFTLoss:

    def test_arithmetic(self):
        total = cpft_loss(LossValue(0.5), LossValue(2.0), LossValue(0.1), beta=10, gamma=1)
        assert total.value == pytest.approx(20.6)

    def test_zero_weights_equal_ce(self):
        ce = ce_loss(scores_of([1.0, 2.0, 3.0]), 0)
        total = cpft_loss(ce, LossValue(5.0, grad_relevance=np.ones(3)), LossValue(1.0), beta=0, gamma=0)
        assert total.value == ce.value
        np.testing.assert_array_equal(total.grad_relevance, ce.grad_relevance)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            cpft_loss(LossValue(0.0), LossValue(0.0), LossValue(0.0), beta=-1, gamma=0)

    def test_relevance_gradients_from_different_batches_rejected(self):
        ce = ce_loss(scores_of(np.zeros((3, 5))), [0, 1, 2])
        cps = cps_proxy(np.full((2, 5), 0.8), q_hat=0.8, tau=0.1)
        with pytest.raises(ShapeMismatch):
            cpft_loss(ce, cps, LossValue(0.0), beta=1.0, gamma=0.0)

    def test_zero_weight_term_shape_is_ignored(self):
        ce = ce_loss(scores_of(np.zeros((3, 5))), [0, 1, 2])
        cps = cps_proxy(np.full((2, 5), 0.8), q_hat=0.8, tau=0.1)
        total = cpft_loss(ce, cps, LossValue(0.0), beta=0.0, gamma=0.0)
        np.testing.assert_array_equal(total.grad_relevance, ce.grad_relevance)

    def test_backpropagated_and_relevance_terms_do_not_mix(self, gru_params):
        scores, cache = forward(gru_params, collate([(1, 2), (3,)]))
        ce = ce_loss(scores, [4, 5])
        backed = ce.with_grads(backward_batch(gru_params, cache, ce.grad_relevance))
        raw = cps_proxy(1.0 - scores.confidence, q_hat=0.9, tau=0.1)
        with pytest.raises(ShapeMismatch):
            cpft_loss(backed, raw, LossValue(0.0), beta=1.0, gamma=0.0)

    def test_with_grads_carries_only_the_bundle(self, gru_params):
        scores, cache = forward(gru_params, collate([(1, 2)]))
        ce = ce_loss(scores, [3])
        backed = ce.with_grads(backward_batch(gru_params, cache, ce.grad_relevance))
        assert backed.value == ce.value
        assert backed.grad_relevance is None and backed.grad_embeddings is None
        assert backed.grads is not None

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_gradient(self, seed):
        """CE and CPS on different batches plus CPD, backpropagated through the encoder."""
        rng = np.random.default_rng(seed)
        n_items = int(rng.integers(6, 13))
        params = init_params(n_items, int(rng.integers(2, 9)), "gru", seed=seed, scale=1.0)
        train = [tuple(int(i) for i in rng.integers(n_items, size=int(rng.integers(1, 5)))) for _ in range(3)]
        train_t = rng.integers(n_items, size=3)
        calib = [tuple(int(i) for i in rng.integers(n_items, size=int(rng.integers(1, 5)))) for _ in range(2)]
        selections = [list(rng.choice(n_items, size=2, replace=False)) for _ in range(2)]
        calib_t = [int(t) for t in rng.integers(n_items, size=2)]
        beta, gamma, tau = 0.7, 1.3, 0.2
        q_hat = 0.9

        def total(p):
            ce = ce_loss(forward(p, collate(train))[0], train_t)
            s = 1.0 - forward(p, collate(calib))[0].confidence
            cps = cps_proxy(s, q_hat, tau)
            cpd = cpd_distance(selections, calib_t, p.embeddings, k=2)
            return cpft_loss(LossValue(ce.value), LossValue(cps.value), LossValue(cpd.value), beta, gamma)

        scores, ce_cache = forward(params, collate(train))
        ce = ce_loss(scores, train_t)
        ce = ce.with_grads(backward_batch(params, ce_cache, ce.grad_relevance))
        cal_scores, cal_cache = forward(params, collate(calib))
        cps = cps_proxy(1.0 - cal_scores.confidence, q_hat, tau)
        cps = cps.with_grads(backward_batch(params, cal_cache, cps.grad_relevance))
        cpd = cpd_distance(selections, calib_t, params.embeddings, k=2)
        cpd = cpd.with_grads(GradientBundle.zeros_like(params).add_embedding_rows(cpd.grad_embeddings))
        grads = cpft_loss(ce, cps, cpd, beta, gamma).grads

        for name in params.names():
            tensor = params.tensors[name]
            for _ in range(3):
                index = tuple(int(rng.integers(s)) for s in tensor.shape)
                original = tensor[index]
                tensor[index] = original + EPS
                up = total(params).value
                tensor[index] = original - EPS
                down = total(params).value
                tensor[index] = original
                np.testing.assert_allclose(grads.tensors[name][index], (up - down) / (2 * EPS), rtol=1e-4, atol=1e-7)
