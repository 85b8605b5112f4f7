"""
Two-stage pipeline.

Stage one (pretrain) minimises cross-entropy on next-item pairs inside each
training prefix. Stage two (finetune) adds the conformal objectives computed
on calibration pairs: every mini-batch scores its calibration prefixes, takes
the conformal quantile of the true items' nonconformity, builds prediction
sets and backpropagates CE + beta * CPS + gamma * CPD. The CE term also
supervises the calibration pairs themselves, and early stopping only runs
when the calibration pairs are not the validation pairs.

Neither stage reads the last item of a sequence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .config import TrainConfig
from .conformal import (
    ConformalThreshold,
    calibration_scores,
    conformal_quantile,
    construct_sets,
    coverage_rate,
    nonconformity,
)
from .core import DivergenceDetected, EmptyCalibrationBatch, NoEligibleUsers, SequenceSplit
from .data import Dataset, Example, calibration_examples, supervised_examples, validation_examples
from .evaluation import ranking_metrics
from .logging_config import get_trace_logger
from .losses import LossValue, ce_loss, cpd_loss, cps_hard, cps_proxy, cpft_loss
from .model import GradientBundle, ModelParams, backward_batch, collate, forward, softmax, score_prefixes

logger = logging.getLogger(__name__)
trace_logger = get_trace_logger()


@dataclass
class OptimizerState:
    """Adaptive-moment state: first/second moments per parameter and a step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParams, learning_rate: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0, learning_rate, beta1, beta2, eps)


def apply_update(params: ModelParams, opt_state: OptimizerState,
                 grads: GradientBundle) -> Tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam step. Inputs are left untouched."""
    grads.check_congruent(params)
    step = opt_state.step + 1
    b1, b2 = opt_state.beta1, opt_state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step

    tensors, m_new, v_new = {}, {}, {}
    for name, value in params.tensors.items():
        g = grads.tensors[name]
        m = b1 * opt_state.m[name] + (1.0 - b1) * g
        v = b2 * opt_state.v[name] + (1.0 - b2) * (g * g)
        tensors[name] = value - opt_state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + opt_state.eps)
        m_new[name] = m
        v_new[name] = v
    state = OptimizerState(m_new, v_new, step, opt_state.learning_rate, b1, b2, opt_state.eps)
    return ModelParams(params.encoder, tensors), state


class EpochTrace(BaseModel):
    stage: str
    epoch: int
    ce: float
    cps: float          # hard mean set size on calibration pairs
    cpd: float
    coverage: float
    mean_set_size: float
    cps_proxy: float = 0.0
    loss: float = 0.0
    q_hat: float = 0.0
    tau: float = 0.0
    valid_ndcg: Optional[float] = None
    selected: bool = False  # the stage returned this epoch's parameters


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceDetected(f"{what} became non-finite ({value})")


class _EarlyStopping:
    """Tracks validation NDCG@10; remembers the best parameters."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.best_params: Optional[ModelParams] = None
        self.best_epoch: Optional[int] = None
        self.bad_epochs = 0

    def update(self, score: float, params: ModelParams, epoch: int) -> bool:
        """Record a score; True when training should stop."""
        if self.best is None or score > self.best:
            self.best = score
            self.best_params = params.copy()
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, params: ModelParams, traces: List[EpochTrace]) -> ModelParams:
        """Pick the parameters to return and flag their epoch in the traces."""
        if self.best_params is not None:
            params = self.best_params
            chosen = self.best_epoch
        else:
            chosen = traces[-1].epoch if traces else None
        for trace in traces:
            trace.selected = trace.epoch == chosen
        if traces:
            logger.info(f"{traces[-1].stage}: returning parameters from epoch {chosen} of {len(traces)}")
        return params


def _valid_ndcg(params: ModelParams, valid: Sequence[Example], config: TrainConfig) -> float:
    _, ndcg = ranking_metrics(params, valid, ks=(10,), mask_history=config.mask_history, max_len=config.max_seq_len)
    return ndcg[10]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class _CalibrationStats:
    ce: float = 0.0
    cps: float = 0.0
    cps_proxy: float = 0.0
    cpd: float = 0.0
    coverage: float = 0.0
    loss: float = 0.0
    q_hat: float = 0.0
    rows: int = 0
    ce_rows: int = 0

    def add(self, n: int, cps: float, cps_proxy_value: float, cpd: float, coverage: float, q_hat: float) -> None:
        self.rows += n
        self.cps += n * cps
        self.cps_proxy += n * cps_proxy_value
        self.cpd += n * cpd
        self.coverage += n * coverage
        self.q_hat += n * q_hat

    def mean(self, field: str) -> float:
        total = getattr(self, field)
        if field == "ce":
            return total / self.ce_rows if self.ce_rows else 0.0
        return total / self.rows if self.rows else 0.0


def _calibrate_batch(params: ModelParams, examples: Sequence[Example], config: TrainConfig,
                     frozen: Optional[ConformalThreshold], tau: float):
    """Forward pass on calibration pairs plus every conformal quantity for the batch."""
    scores, cache = forward(params, collate([e.prefix for e in examples], config.max_seq_len))
    s = nonconformity(scores)
    targets = [e.target for e in examples]
    threshold = frozen or conformal_quantile(calibration_scores(scores.confidence, targets), config.alpha)
    sets = construct_sets(s, threshold, [e.user for e in examples])
    proxy = cps_proxy(s, threshold.q_hat, tau, truths=targets)
    cpd = cpd_loss(list(zip(sets, targets)), params.embeddings, config.top_k_closest,
                   freeze_truth=config.freeze_truth_embedding)
    return cache, threshold, sets, proxy, cpd, coverage_rate(sets, targets)


def _epoch_threshold(params: ModelParams, examples: Sequence[Example], config: TrainConfig) -> ConformalThreshold:
    conf = softmax(score_prefixes(params, [e.prefix for e in examples], max_len=config.max_seq_len))
    return conformal_quantile(calibration_scores(conf, [e.target for e in examples]), config.alpha)


def monitor_calibration(params: ModelParams, examples: Sequence[Example], config: TrainConfig,
                        tau: Optional[float] = None) -> _CalibrationStats:
    """Conformal statistics over calibration pairs without updating parameters."""
    stats = _CalibrationStats()
    frozen = _epoch_threshold(params, examples, config) if config.qhat_mode == "epoch" else None
    for start in range(0, len(examples), config.batch_size):
        chunk = examples[start:start + config.batch_size]
        _, threshold, sets, proxy, cpd, coverage = _calibrate_batch(params, chunk, config, frozen, tau or config.tau)
        stats.add(len(chunk), cps_hard(sets), proxy.value, cpd.value, coverage, threshold.q_hat)
    return stats


def _log_trace(trace: EpochTrace) -> None:
    trace_logger.info(f"{trace.stage} epoch {trace.epoch}", extra={"trace": trace.model_dump()})
    logger.info(
        f"{trace.stage} epoch {trace.epoch}: ce={trace.ce:.4f} cps={trace.cps:.2f} cpd={trace.cpd:.4f} "
        f"coverage={trace.coverage:.3f} q_hat={trace.q_hat:.6f}"
        + (f" valid_ndcg@10={trace.valid_ndcg:.4f}" if trace.valid_ndcg is not None else "")
    )


def pretrain(params: ModelParams, dataset: Dataset, config: TrainConfig) -> Tuple[ModelParams, List[EpochTrace]]:
    """Stage one: cross-entropy on next-item pairs inside the training prefixes."""
    splits = dataset.splits
    examples = supervised_examples(splits, config.ce_positions)
    if not examples:
        raise NoEligibleUsers("no supervised pairs: every training prefix is shorter than two items")
    valid = validation_examples(splits)
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.create(params, config.pretrain_learning_rate, config.adam_beta1, config.adam_beta2,
                                config.adam_eps)
    stopper = _EarlyStopping(config.early_stopping_patience)
    traces: List[EpochTrace] = []

    logger.info(f"Pretraining {params.encoder} encoder on {len(examples)} pairs for {config.pretrain_epochs} epochs")
    for epoch in range(config.pretrain_epochs):
        ce_total = 0.0
        for idx in _batches(len(examples), config.batch_size, rng):
            chunk = [examples[i] for i in idx]
            scores, cache = forward(params, collate([e.prefix for e in chunk], config.max_seq_len))
            ce = ce_loss(scores, [e.target for e in chunk])
            _check_finite(ce.value, "cross-entropy")
            params, opt = apply_update(params, opt, backward_batch(params, cache, ce.grad_relevance))
            ce_total += ce.value * len(chunk)

        monitor = monitor_calibration(params, valid, config)
        trace = EpochTrace(
            stage="pretrain", epoch=epoch + 1, ce=ce_total / len(examples),
            cps=monitor.mean("cps"), cpd=monitor.mean("cpd"), coverage=monitor.mean("coverage"),
            mean_set_size=monitor.mean("cps"), cps_proxy=monitor.mean("cps_proxy"),
            loss=ce_total / len(examples), q_hat=monitor.mean("q_hat"), tau=config.tau,
        )
        stop = False
        if config.early_stopping_patience:
            trace.valid_ndcg = _valid_ndcg(params, valid, config)
            stop = stopper.update(trace.valid_ndcg, params, epoch + 1)
        traces.append(trace)
        _log_trace(trace)
        if stop:
            logger.info(f"Early stopping after epoch {epoch + 1}; best valid NDCG@10={stopper.best:.4f}")
            break

    return stopper.restore(params, traces), traces


def _ce_pairs_by_user(splits: Sequence[SequenceSplit], calib: Sequence[Example],
                      config: TrainConfig) -> Dict[int, List[Example]]:
    """Supervised pairs plus each user's calibration pair, without duplicates."""
    by_user: Dict[int, List[Example]] = {}
    seen = set()
    for ex in list(supervised_examples(splits, config.ce_positions)) + list(calib):
        key = (ex.user, len(ex.prefix))
        if key in seen:
            continue
        seen.add(key)
        by_user.setdefault(ex.user, []).append(ex)
    return by_user


def finetune(params: ModelParams, dataset: Dataset, config: TrainConfig) -> Tuple[ModelParams, List[EpochTrace]]:
    """Stage two: CE on training and calibration pairs plus CPS/CPD on calibration pairs, all parameters trainable."""
    splits = dataset.splits
    calib = calibration_examples(splits, config.use_validation_in_finetune)
    if not calib:
        raise EmptyCalibrationBatch("no calibration pairs to fine-tune on")
    ce_by_user = _ce_pairs_by_user(splits, calib, config)
    valid = validation_examples(splits)
    # validation pairs double as calibration pairs, so they cannot pick the epoch
    early_stopping = config.early_stopping_patience if not config.use_validation_in_finetune else 0
    if config.early_stopping_patience and not early_stopping:
        logger.info("Fine-tuning calibrates on validation pairs; early stopping disabled")

    ce_weight, beta, gamma = config.loss_weights()
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.create(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    stopper = _EarlyStopping(early_stopping)
    traces: List[EpochTrace] = []

    logger.info(
        f"Fine-tuning ({config.loss_config}: ce={ce_weight} beta={beta} gamma={gamma}) on {len(calib)} "
        f"calibration pairs for {config.epochs} epochs, alpha={config.alpha}, q_hat per {config.qhat_mode}"
    )
    for epoch in range(config.epochs):
        tau = config.tau_at(epoch)
        frozen = _epoch_threshold(params, calib, config) if config.qhat_mode == "epoch" else None
        stats = _CalibrationStats()
        for idx in _batches(len(calib), config.batch_size, rng):
            chunk = [calib[i] for i in idx]
            cal_cache, threshold, sets, proxy, cpd, coverage = _calibrate_batch(params, chunk, config, frozen, tau)

            ce = LossValue.zero()
            ce_examples = [ex for c in chunk for ex in ce_by_user.get(c.user, ())]
            if ce_examples:
                scores, ce_cache = forward(params, collate([e.prefix for e in ce_examples], config.max_seq_len))
                ce = ce_loss(scores, [e.target for e in ce_examples])
                if ce_weight:
                    ce = ce.with_grads(backward_batch(params, ce_cache, ce.grad_relevance))
                stats.ce += ce.value * len(ce_examples)
                stats.ce_rows += len(ce_examples)
            if beta:
                proxy = proxy.with_grads(backward_batch(params, cal_cache, proxy.grad_relevance))
            if gamma:
                cpd = cpd.with_grads(GradientBundle.zeros_like(params).add_embedding_rows(cpd.grad_embeddings))

            total = cpft_loss(ce, proxy, cpd, beta, gamma, ce_weight)
            _check_finite(total.value, "CPFT loss")
            if total.grads is not None:
                params, opt = apply_update(params, opt, total.grads)
                if not params.is_finite():
                    raise DivergenceDetected(f"parameters became non-finite in fine-tuning epoch {epoch + 1}")

            stats.loss += total.value * len(chunk)
            stats.add(len(chunk), cps_hard(sets), proxy.value, cpd.value, coverage, threshold.q_hat)

        trace = EpochTrace(
            stage="finetune", epoch=epoch + 1, ce=stats.mean("ce"), cps=stats.mean("cps"), cpd=stats.mean("cpd"),
            coverage=stats.mean("coverage"), mean_set_size=stats.mean("cps"), cps_proxy=stats.mean("cps_proxy"),
            loss=stats.mean("loss"), q_hat=stats.mean("q_hat"), tau=tau,
        )
        stop = False
        if early_stopping:
            trace.valid_ndcg = _valid_ndcg(params, valid, config)
            stop = stopper.update(trace.valid_ndcg, params, epoch + 1)
        traces.append(trace)
        _log_trace(trace)
        if stop:
            logger.info(f"Early stopping after epoch {epoch + 1}; best valid NDCG@10={stopper.best:.4f}")
            break

    return stopper.restore(params, traces), traces


def write_traces(traces: Sequence[EpochTrace], path) -> None:
    """Line-delimited JSON, one record per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace.model_dump_json() + "\n")
