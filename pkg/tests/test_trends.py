"""
Statistical and trend checks on synthetic data.

These train many small models and take minutes, so they are deselected by
default. Run them with: pytest -m slow
"""
import numpy as np
import pytest

from cpft.config import TrainConfig
from cpft.data import SynthSpec, generate_synthetic
from cpft.evaluation import evaluate
from cpft.model import init_params
from cpft.training import finetune, pretrain

pytestmark = pytest.mark.slow


def pretrained_model(seed, n_users=300, n_items=50, concentration=0.9, epochs=15):
    dataset = generate_synthetic(SynthSpec(n_users=n_users, n_items=n_items, min_len=6, max_len=12,
                                           transition_concentration=concentration, seed=seed))
    cfg = TrainConfig(d=16, seed=seed, pretrain_epochs=epochs, pretrain_learning_rate=5e-3,
                      early_stopping_patience=0, batch_size=64, ce_positions="all")
    params, _ = pretrain(init_params(n_items, 16, "gru", seed=seed), dataset, cfg)
    return dataset, params


def finetune_config(seed, **updates):
    base = dict(d=16, seed=seed, epochs=20, learning_rate=5e-3, early_stopping_patience=0, batch_size=64,
                ce_positions="all")
    base.update(updates)
    return TrainConfig(**base)


class TestFinetuneTrends:

    def test_set_size_halves(self):
        shrunk = 0
        for seed in range(10):
            dataset, params = pretrained_model(seed, epochs=2)
            _, traces = finetune(params, dataset, finetune_config(seed))
            shrunk += traces[-1].mean_set_size <= 0.5 * traces[0].mean_set_size
        assert shrunk >= 8

    def test_coverage_converges_to_target(self):
        ok = 0
        for seed in range(10):
            dataset, params = pretrained_model(seed)
            cfg = finetune_config(seed)
            _, traces = finetune(params, dataset, cfg)
            tail = traces[-max(1, len(traces) // 4):]
            ok += all(abs(t.coverage - (1 - cfg.alpha)) <= 0.15 for t in tail)
        assert ok >= 8

    def test_single_batch_loss_decreases(self):
        monotone = 0
        for seed in range(10):
            dataset = generate_synthetic(SynthSpec(n_users=4, n_items=10, min_len=6, max_len=8, seed=seed))
            cfg = finetune_config(seed, epochs=10, learning_rate=1e-2, d=8)
            _, traces = finetune(init_params(10, 8, "gru", seed=seed), dataset, cfg)
            losses = [t.loss for t in traces[2:]]
            monotone += all(b <= a for a, b in zip(losses, losses[1:]))
        assert monotone >= 9


class TestRecommendationQuality:

    def test_cpft_not_worse_than_ce_continuation(self):
        diffs = []
        for seed in range(10):
            dataset, params = pretrained_model(seed, n_users=2000, n_items=500, concentration=0.85, epochs=10)
            cpft_params, _ = finetune(params.copy(), dataset, finetune_config(seed, epochs=5))
            ce_params, _ = finetune(params.copy(), dataset, finetune_config(seed, epochs=5, loss_config="ce"))
            cpft = evaluate(cpft_params, dataset, 0.3, ks=(10,)).recall_at[10]
            ce = evaluate(ce_params, dataset, 0.3, ks=(10,)).recall_at[10]
            diffs.append(cpft - ce)
        print(f"paired mean Recall@10 difference (CPFT - CE): {np.mean(diffs):+.4f}")
        assert np.mean(diffs) >= 0

    def test_cps_only_is_worst_ablation(self):
        dataset, params = pretrained_model(0)
        recall = {}
        for name in ("cps", "ce_cps_cpd"):
            tuned, _ = finetune(params.copy(), dataset, finetune_config(0, loss_config=name))
            recall[name] = evaluate(tuned, dataset, 0.3, ks=(10,)).recall_at[10]
        assert recall["cps"] < recall["ce_cps_cpd"]
