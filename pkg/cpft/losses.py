"""
Training objectives: cross-entropy, conformal set size (CPS) and conformal
set distance (CPD), plus their weighted combination.

Each returns a LossValue. Relevance-space gradients are batch means (divided by
the number of rows); CPD produces sparse gradients on embedding rows instead.
Once backpropagated, a LossValue can also carry a parameter-space GradientBundle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conformal import PredictionSet
from .core import EmptyBatch, NonPositiveTau, ShapeMismatch, ZeroNormEmbedding
from .model import GradientBundle, ScoreVector, sigmoid

logger = logging.getLogger(__name__)


@dataclass
class LossValue:
    value: float
    grad_relevance: Optional[np.ndarray] = None
    grad_embeddings: Optional[Dict[int, np.ndarray]] = None
    grads: Optional[GradientBundle] = None

    @classmethod
    def zero(cls) -> "LossValue":
        return cls(0.0)

    def with_grads(self, grads: GradientBundle) -> "LossValue":
        """Fold the relevance and embedding gradients into a parameter-space bundle."""
        return replace(self, grad_relevance=None, grad_embeddings=None, grads=grads)


def _logsumexp(relevance: np.ndarray) -> np.ndarray:
    top = relevance.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(relevance - top).sum(axis=1, keepdims=True)))[:, 0]


def ce_loss(conf: ScoreVector, truth) -> LossValue:
    """Mean -log confidence[truth]; gradient p - onehot(truth) per row, averaged."""
    relevance = np.atleast_2d(conf.relevance)
    p = np.atleast_2d(conf.confidence)
    targets = np.atleast_1d(np.asarray(truth, dtype=np.int64))
    if targets.shape[0] != p.shape[0]:
        raise ShapeMismatch(f"{targets.shape[0]} targets for {p.shape[0]} rows")
    rows = np.arange(p.shape[0])
    nll = _logsumexp(relevance) - relevance[rows, targets]
    grad = p.copy()
    grad[rows, targets] -= 1.0
    grad /= p.shape[0]
    return LossValue(float(nll.mean()), grad_relevance=grad.reshape(np.shape(conf.confidence)))


def cps_hard(sets: Sequence[PredictionSet]) -> float:
    """Exact mean prediction-set size."""
    if not sets:
        raise EmptyBatch("CPS needs at least one prediction set")
    return float(np.mean([s.size for s in sets]))


def cps_proxy(scores_batch: np.ndarray, q_hat: float, tau: float, truths=None) -> LossValue:
    """
    Smooth set size: sum_j sigmoid((q_hat - s_ij) / tau), averaged over rows.

    q_hat is a constant; the gradient reaches relevance through s = 1 - softmax.
    When truths are given, each row's true item still counts in the value but its
    own membership term is held constant too, so descent shrinks the set by
    pushing the other members out instead of pushing the truth below q_hat.
    """
    if tau <= 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    s = np.atleast_2d(np.asarray(scores_batch, dtype=np.float64))
    n_rows = s.shape[0]
    if n_rows == 0:
        raise EmptyBatch("CPS proxy needs at least one row")
    membership = sigmoid((q_hat - s) / tau)
    value = float(membership.sum() / n_rows)

    # d value / d confidence = sigma'(u) / (tau * B), since ds = -dp
    dp = membership * (1.0 - membership) / (tau * n_rows)
    if truths is not None:
        targets = np.atleast_1d(np.asarray(truths, dtype=np.int64))
        if targets.shape[0] != n_rows:
            raise ShapeMismatch(f"{targets.shape[0]} truths for {n_rows} rows")
        dp[np.arange(n_rows), targets] = 0.0
    p = 1.0 - s
    grad = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    return LossValue(value, grad_relevance=grad.reshape(np.shape(scores_batch)))


def _cosine(a: np.ndarray, b: np.ndarray) -> Tuple[float, float, float]:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormEmbedding("cosine similarity undefined for a zero-norm embedding")
    return float(a @ b) / (na * nb), na, nb


def top_k_closest(pred_set: PredictionSet, truth_emb: np.ndarray, embeddings: np.ndarray, k: int) -> List[int]:
    """Members most cosine-similar to truth_emb, best first; ties go to the lower item id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if pred_set.size == 0:
        return []
    members = np.asarray(pred_set.members, dtype=np.int64)
    vectors = embeddings[members]
    norms = np.linalg.norm(vectors, axis=1)
    truth_norm = np.linalg.norm(truth_emb)
    if truth_norm == 0.0 or np.any(norms == 0.0):
        raise ZeroNormEmbedding("cosine similarity undefined for a zero-norm embedding")
    sims = (vectors @ truth_emb) / (norms * truth_norm)
    order = np.lexsort((members, -sims))
    return [int(members[i]) for i in order[:k]]


def cpd_distance(selections: Sequence[Sequence[int]], truths: Sequence[int], embeddings: np.ndarray,
                 k: int, freeze_truth: bool = False) -> LossValue:
    """
    (1 / (k |B|)) sum_i sum_{v in selection_i} (1 - cos(e_v, e_truth_i)).

    Selections are treated as constants; gradients flow through the cosine
    terms only, into both the candidate and (unless frozen) the truth rows.
    """
    if len(selections) != len(truths):
        raise ShapeMismatch(f"{len(selections)} selections for {len(truths)} truths")
    if not selections:
        raise EmptyBatch("CPD needs at least one (set, truth) pair")
    scale = 1.0 / (k * len(selections))
    total = 0.0
    grad: Dict[int, np.ndarray] = {}
    for chosen, truth in zip(selections, truths):
        b = embeddings[truth]
        for item in chosen:
            a = embeddings[item]
            cos, na, nb = _cosine(a, b)
            total += 1.0 - cos
            # d cos / d a = b / (|a||b|) - cos * a / |a|^2, symmetric for b
            da = b / (na * nb) - cos * a / (na * na)
            grad[item] = grad.get(item, 0.0) - scale * da
            if not freeze_truth:
                db = a / (na * nb) - cos * b / (nb * nb)
                grad[truth] = grad.get(truth, 0.0) - scale * db
    return LossValue(total * scale, grad_embeddings=grad)


def cpd_loss(batch: Sequence[Tuple[PredictionSet, int]], embeddings: np.ndarray, k: int,
             freeze_truth: bool = False) -> LossValue:
    """Select TopKClosest per (set, truth) pair, then score the selection's distance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    selections = [top_k_closest(s, embeddings[truth], embeddings, k) for s, truth in batch]
    return cpd_distance(selections, [truth for _, truth in batch], embeddings, k, freeze_truth)


def _weighted_arrays(terms: Sequence[Tuple[float, Optional[np.ndarray]]]) -> Optional[np.ndarray]:
    present = [(w, g) for w, g in terms if g is not None and w != 0.0]
    if not present:
        return None
    shape = present[0][1].shape
    if any(g.shape != shape for _, g in present):
        raise ShapeMismatch(
            f"relevance gradients of shapes {[g.shape for _, g in present]} come from different batches; "
            "backpropagate each term with with_grads() before combining"
        )
    return sum(w * g for w, g in present)


def cpft_loss(ce: LossValue, cps: LossValue, cpd: LossValue, beta: float, gamma: float,
              ce_weight: float = 1.0) -> LossValue:
    """
    ce_weight * CE + beta * CPS + gamma * CPD, values and gradients alike.

    Terms from one batch combine in relevance and embedding space. Terms from
    different batches must each be backpropagated first; their bundles add up
    per parameter. Mixing the two kinds raises ShapeMismatch.
    """
    if beta < 0 or gamma < 0:
        raise ValueError("beta and gamma must be non-negative")
    terms = [(ce_weight, ce), (beta, cps), (gamma, cpd)]
    value = sum(w * t.value for w, t in terms if w != 0.0)

    active = [t for w, t in terms if w != 0.0]
    if any(t.grads is not None for t in active) and any(
        t.grad_relevance is not None or t.grad_embeddings for t in active
    ):
        raise ShapeMismatch("cannot combine backpropagated terms with relevance-space gradients")

    grad_relevance = _weighted_arrays([(w, t.grad_relevance) for w, t in terms])

    grad_embeddings: Optional[Dict[int, np.ndarray]] = None
    for w, t in terms:
        if w == 0.0 or not t.grad_embeddings:
            continue
        grad_embeddings = {} if grad_embeddings is None else grad_embeddings
        for item, g in t.grad_embeddings.items():
            grad_embeddings[item] = grad_embeddings.get(item, 0.0) + w * g

    grads: Optional[GradientBundle] = None
    for w, t in terms:
        if w == 0.0 or t.grads is None:
            continue
        if grads is None:
            grads = GradientBundle({k: np.zeros_like(v) for k, v in t.grads.tensors.items()})
        grads.add_(t.grads, w)

    return LossValue(float(value), grad_relevance, grad_embeddings, grads)
