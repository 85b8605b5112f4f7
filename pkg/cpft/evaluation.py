"""
Leave-one-out evaluation with full ranking over the catalog.

The last item of each sequence is the test target, ranked from the prefix
that ends at the penultimate item. Conformal diagnostics calibrate on the
validation pairs (prefix -> penultimate item) and are measured on the test pairs.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .conformal import split_cp_from_confidence
from .core import InteractionSequence, NoEligibleUsers, validate_sequence
from .data import Dataset, Example, test_examples, validation_examples
from .losses import cpd_loss
from .model import ModelParams, encode, score_all, score_prefixes, softmax

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 50)


class RankedList(BaseModel):
    model_config = ConfigDict(frozen=True)

    items: Tuple[int, ...]
    rank_of_truth: Optional[int] = Field(None, ge=1)


class MetricReport(BaseModel):
    recall_at: Dict[int, float]
    ndcg_at: Dict[int, float]
    coverage: float
    mean_set_size: float
    n_users: int
    alpha: float
    q_hat: float
    cpd: float = 0.0


def _masked(relevance: np.ndarray, history: Sequence[int], keep: Optional[int]) -> np.ndarray:
    out = relevance.astype(np.float64, copy=True)
    hidden = [i for i in set(history) if i != keep]
    out[hidden] = -np.inf
    return out


def rank_full(params: ModelParams, seq: InteractionSequence, truth: Optional[int] = None,
              mask_history: bool = False) -> RankedList:
    """Whole catalog by descending relevance, lower item id first on ties."""
    relevance = score_all(params, encode(params, seq)).relevance
    if mask_history:
        relevance = _masked(relevance, seq.items, truth)
    order = np.argsort(-relevance, kind="stable")
    rank = None
    if truth is not None:
        rank = int(np.flatnonzero(order == truth)[0]) + 1
    return RankedList(items=tuple(int(i) for i in order), rank_of_truth=rank)


def hit_rate_at_k(rank_of_truth: Optional[int], k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(rank_of_truth is not None and rank_of_truth <= k)


def ndcg_at_k(rank_of_truth: Optional[int], k: int) -> float:
    # one relevant item, so the ideal DCG is 1
    if not hit_rate_at_k(rank_of_truth, k):
        return 0.0
    return 1.0 / math.log2(rank_of_truth + 1)


def ranks_of_targets(relevance: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """1-based rank of each row's target under the stable tie rule, without sorting."""
    rows = np.arange(relevance.shape[0])
    targets = np.asarray(targets, dtype=np.int64)
    target_rel = relevance[rows, targets][:, None]
    ahead = (relevance > target_rel).sum(axis=1)
    tied_lower = ((relevance == target_rel) & (np.arange(relevance.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return 1 + ahead + tied_lower


def _aggregate(ranks: np.ndarray, ks: Sequence[int]) -> Tuple[Dict[int, float], Dict[int, float]]:
    gains = 1.0 / np.log2(ranks + 1)
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, gains, 0.0))) for k in ks}
    return recall, ndcg


def _relevance(params: ModelParams, examples: Sequence[Example], mask_history: bool,
               max_len: Optional[int]) -> np.ndarray:
    relevance = score_prefixes(params, [e.prefix for e in examples], max_len=max_len)
    if mask_history:
        for row, ex in enumerate(examples):
            relevance[row] = _masked(relevance[row], ex.prefix, ex.target)
    return relevance


def ranking_metrics(params: ModelParams, examples: Sequence[Example], ks: Sequence[int] = DEFAULT_KS,
                    mask_history: bool = False, max_len: Optional[int] = None) -> Tuple[Dict[int, float], Dict[int, float]]:
    """Mean HR@K and NDCG@K over examples."""
    if not examples:
        raise NoEligibleUsers("no examples to rank")
    ranks = ranks_of_targets(_relevance(params, examples, mask_history, max_len), [e.target for e in examples])
    return _aggregate(ranks, ks)


def evaluate(params: ModelParams, dataset: Dataset, alpha: float, ks: Sequence[int] = DEFAULT_KS,
             mask_history: bool = False, top_k_closest: int = 10, max_len: Optional[int] = None) -> MetricReport:
    splits = dataset.splits
    if not splits:
        raise NoEligibleUsers("dataset has no users with at least three interactions")
    tests = test_examples(splits)
    valids = validation_examples(splits)

    test_relevance = score_prefixes(params, [e.prefix for e in tests], max_len=max_len)
    ranked = test_relevance
    if mask_history:
        ranked = np.stack([_masked(r, e.prefix, e.target) for r, e in zip(test_relevance, tests)])
    ranks = ranks_of_targets(ranked, [e.target for e in tests])

    # conformal diagnostics always use the unmasked confidence over the full catalog
    valid_conf = softmax(score_prefixes(params, [e.prefix for e in valids], max_len=max_len))
    test_conf = softmax(test_relevance)
    cp = split_cp_from_confidence(
        valid_conf, [e.target for e in valids], test_conf, [e.target for e in tests], alpha,
        calib_users=[e.user for e in valids], test_users=[e.user for e in tests],
    )
    recall, ndcg = _aggregate(ranks, ks)
    cpd = cpd_loss(list(zip(cp.sets, cp.truths)), params.embeddings, top_k_closest).value

    report = MetricReport(
        recall_at=recall,
        ndcg_at=ndcg,
        coverage=cp.coverage,
        mean_set_size=cp.mean_set_size,
        n_users=len(tests),
        alpha=alpha,
        q_hat=cp.threshold.q_hat,
        cpd=cpd,
    )
    logger.info(
        f"LOO evaluation on {report.n_users} users: "
        + " ".join(f"R@{k}={v:.4f}" for k, v in report.recall_at.items())
        + f" coverage={report.coverage:.4f} mean_set_size={report.mean_set_size:.2f}"
    )
    return report


def top_n_with_confidence(params: ModelParams, seq: InteractionSequence, n: int = 5,
                          q_hat: Optional[float] = None) -> Tuple[List[Tuple[int, float]], Optional[int]]:
    """Top-n items with their confidence, plus the conformal set size when q_hat is given."""
    validate_sequence(seq, params.catalog_size)
    conf = score_all(params, encode(params, seq)).confidence
    order = np.argsort(-conf, kind="stable")[:n]
    set_size = None
    if q_hat is not None:
        set_size = int(np.sum(1.0 - conf <= q_hat))
    return [(int(i), float(conf[i])) for i in order], set_size


def write_report(report: MetricReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def format_table(reports: Dict[str, MetricReport]) -> str:
    """Aligned text table, one row per named report."""
    if not reports:
        return ""
    ks = sorted(next(iter(reports.values())).recall_at)
    headers = ["run"] + [f"R@{k}" for k in ks] + [f"N@{k}" for k in ks] + ["coverage", "set_size", "users"]
    rows = []
    for name, r in reports.items():
        rows.append([name]
                    + [f"{r.recall_at[k]:.4f}" for k in ks]
                    + [f"{r.ndcg_at[k]:.4f}" for k in ks]
                    + [f"{r.coverage:.4f}", f"{r.mean_set_size:.2f}", str(r.n_users)])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return "\n".join(lines)
