"""
Split conformal prediction over the item catalog.

Nonconformity of item j is 1 - softmax confidence. The threshold q_hat is the
k-th smallest calibration score with k = ceil((1 - alpha)(n + 1)) clamped to n;
a prediction set holds every item whose score is <= q_hat.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .core import EmptyScores, LengthMismatch
from .model import ModelParams, ScoreVector, score_prefixes, softmax

logger = logging.getLogger(__name__)

# absorbs float artefacts such as (1 - 0.7) * 10 == 3.0000000000000004
_CEIL_SLACK = 1e-9


class CalibrationRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    user: int
    score: float = Field(ge=0.0, le=1.0)


class ConformalThreshold(BaseModel):
    model_config = ConfigDict(frozen=True)

    q_hat: float
    alpha: float = Field(gt=0.0, lt=1.0)
    n: int = Field(ge=1)
    k: int = Field(ge=1)


class PredictionSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    user: int
    members: Tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    def __contains__(self, item: int) -> bool:
        return item in self.members


def nonconformity(conf: ScoreVector) -> np.ndarray:
    """1 - confidence, elementwise; works on one user or a batch."""
    return 1.0 - conf.confidence


def quantile_index(n: int, alpha: float) -> int:
    """1-based rank k of the conformal quantile among n calibration scores."""
    k = math.ceil((1.0 - alpha) * (n + 1) - _CEIL_SLACK)
    return max(1, min(n, k))


def conformal_quantile(scores: Sequence[float], alpha: float) -> ConformalThreshold:
    values = np.asarray(scores, dtype=np.float64).ravel()
    n = values.size
    if n == 0:
        raise EmptyScores("conformal quantile needs at least one calibration score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    k = quantile_index(n, alpha)
    # selection instead of a full sort
    q_hat = float(np.partition(values, k - 1)[k - 1])
    return ConformalThreshold(q_hat=q_hat, alpha=alpha, n=n, k=k)


def construct_set(scores: np.ndarray, threshold: ConformalThreshold, user: int = 0) -> PredictionSet:
    members = np.flatnonzero(np.asarray(scores) <= threshold.q_hat)
    return PredictionSet(user=user, members=tuple(int(m) for m in members))


def construct_sets(score_matrix: np.ndarray, threshold: ConformalThreshold,
                   users: Optional[Sequence[int]] = None) -> List[PredictionSet]:
    users = range(score_matrix.shape[0]) if users is None else users
    return [construct_set(row, threshold, user) for row, user in zip(score_matrix, users)]


def coverage_rate(sets: Sequence[PredictionSet], truths: Sequence[int]) -> float:
    if len(sets) != len(truths):
        raise LengthMismatch(f"{len(sets)} prediction sets vs {len(truths)} truths")
    if not sets:
        return 0.0
    covered = sum(1 for s, t in zip(sets, truths) if t in s)
    return covered / len(sets)


def calibration_scores(confidence: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Nonconformity of each row's true item."""
    rows = np.arange(confidence.shape[0])
    return 1.0 - confidence[rows, np.asarray(targets, dtype=np.int64)]


@dataclass
class SplitCPResult:
    threshold: ConformalThreshold
    sets: List[PredictionSet]
    truths: List[int]
    coverage: float
    calibration: List[CalibrationRecord]

    @property
    def mean_set_size(self) -> float:
        return float(np.mean([s.size for s in self.sets])) if self.sets else 0.0


def split_cp_from_confidence(calib_confidence: np.ndarray, calib_targets: Sequence[int],
                             test_confidence: np.ndarray, test_targets: Sequence[int], alpha: float,
                             calib_users: Optional[Sequence[int]] = None,
                             test_users: Optional[Sequence[int]] = None) -> SplitCPResult:
    """Calibrate on one set of confidence rows, build sets for another."""
    if len(calib_targets) != calib_confidence.shape[0] or len(test_targets) != test_confidence.shape[0]:
        raise LengthMismatch("confidence rows and targets differ in length")
    cal = calibration_scores(calib_confidence, calib_targets)
    threshold = conformal_quantile(cal, alpha)
    calib_users = list(range(len(cal))) if calib_users is None else list(calib_users)
    records = [CalibrationRecord(user=u, score=float(min(1.0, max(0.0, s)))) for u, s in zip(calib_users, cal)]
    sets = construct_sets(1.0 - test_confidence, threshold, test_users)
    truths = [int(t) for t in test_targets]
    return SplitCPResult(threshold, sets, truths, coverage_rate(sets, truths), records)


def split_cp(params: ModelParams,
             train_seqs: Optional[Sequence[Sequence[int]]],
             calib_pairs: Sequence[Tuple[Sequence[int], int]],
             test_points: Sequence[Tuple[Sequence[int], int]],
             alpha: float,
             fit: Optional[Callable[[ModelParams, Sequence[Sequence[int]]], ModelParams]] = None,
             calib_users: Optional[Sequence[int]] = None,
             test_users: Optional[Sequence[int]] = None,
             max_len: Optional[int] = None) -> SplitCPResult:
    """
    Split conformal prediction with a sequence model.

    Fits on train_seqs when a fit callable is supplied (otherwise params are
    taken as trained), scores calibration pairs, takes the conformal quantile,
    and builds one prediction set per test point.
    """
    if fit is not None and train_seqs:
        params = fit(params, train_seqs)
    if not calib_pairs:
        raise EmptyScores("split_cp needs calibration pairs")
    calib_conf = softmax(score_prefixes(params, [p for p, _ in calib_pairs], max_len=max_len))
    test_conf = (softmax(score_prefixes(params, [p for p, _ in test_points], max_len=max_len))
                 if test_points else np.empty((0, params.catalog_size)))
    result = split_cp_from_confidence(
        calib_conf, [t for _, t in calib_pairs], test_conf, [t for _, t in test_points], alpha,
        calib_users, test_users,
    )
    logger.info(
        f"split CP alpha={alpha} n_calib={result.threshold.n} q_hat={result.threshold.q_hat:.6f} "
        f"coverage={result.coverage:.4f} mean_set_size={result.mean_set_size:.2f}"
    )
    return result


def write_coverage_audit(result: SplitCPResult, path: Path) -> None:
    """One JSON record per test point: user, set_size, covered, q_hat, alpha."""
    with open(path, "w", encoding="utf-8") as fh:
        for s, truth in zip(result.sets, result.truths):
            fh.write(json.dumps({
                "user": s.user,
                "set_size": s.size,
                "covered": int(truth in s),
                "q_hat": result.threshold.q_hat,
                "alpha": result.threshold.alpha,
            }) + "\n")
