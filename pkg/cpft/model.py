"""
Sequence encoders with hand-written gradients.

An encoder maps a (left-padded) batch of item-id prefixes to one d-vector per
sequence. Items are scored against the same embedding table that feeds the
encoder: relevance = H . E^T, confidence = softmax(relevance).

Two encoders share one interface:
- "gru": single-layer gated recurrent cell, last-position readout
- "mean": mean of the prefix's item embeddings
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CheckpointFormatError,
    EmptySequence,
    InteractionSequence,
    ShapeMismatch,
    validate_sequence,
)

logger = logging.getLogger(__name__)

GRU_WEIGHTS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n")
ENCODER_WEIGHTS: Dict[str, Tuple[str, ...]] = {"gru": GRU_WEIGHTS, "mean": ()}


@dataclass
class ModelParams:
    """Embedding table plus encoder weights, keyed by name in a fixed order."""

    encoder: str
    tensors: Dict[str, np.ndarray]

    @property
    def embeddings(self) -> np.ndarray:
        return self.tensors["embeddings"]

    @property
    def catalog_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def names(self) -> List[str]:
        return ["embeddings", *ENCODER_WEIGHTS[self.encoder]]

    def copy(self) -> "ModelParams":
        return ModelParams(self.encoder, {k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass
class GradientBundle:
    """Per-parameter gradients, shape-congruent with a ModelParams."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientBundle":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})

    def check_congruent(self, params: ModelParams) -> None:
        if set(self.tensors) != set(params.tensors):
            raise ShapeMismatch(f"gradient keys {sorted(self.tensors)} != {sorted(params.tensors)}")
        for name, value in params.tensors.items():
            if self.tensors[name].shape != value.shape:
                raise ShapeMismatch(f"{name}: {self.tensors[name].shape} != {value.shape}")

    def add_(self, other: "GradientBundle", weight: float = 1.0) -> "GradientBundle":
        if weight == 0.0:
            return self
        for name, value in other.tensors.items():
            self.tensors[name] += weight * value
        return self

    def add_embedding_rows(self, rows: Mapping[int, np.ndarray], weight: float = 1.0) -> "GradientBundle":
        if weight == 0.0:
            return self
        emb = self.tensors["embeddings"]
        for item in sorted(rows):
            emb[item] += weight * rows[item]
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(catalog_size: int, d: int, encoder: str = "gru", seed: int = 0, scale: float = 0.1) -> ModelParams:
    """Uniform(-scale, scale) initialisation from a seeded generator."""
    if encoder not in ENCODER_WEIGHTS:
        raise ValueError(f"unknown encoder '{encoder}'")
    if d < 1 or catalog_size < 1:
        raise ValueError("catalog_size and d must be positive")
    rng = np.random.default_rng(seed)
    tensors = {"embeddings": rng.uniform(-scale, scale, size=(catalog_size, d))}
    for name in ENCODER_WEIGHTS[encoder]:
        shape = (d,) if name.startswith("b_") else (d, d)
        tensors[name] = rng.uniform(-scale, scale, size=shape)
    return ModelParams(encoder, tensors)


@dataclass(frozen=True)
class SequenceRepr:
    h: np.ndarray


@dataclass(frozen=True)
class ScoreVector:
    """Relevance and softmax confidence; 1-D for one user, 2-D (batch, |V|) for many."""

    relevance: np.ndarray
    confidence: np.ndarray


def softmax(relevance: np.ndarray) -> np.ndarray:
    shifted = relevance - relevance.max(axis=-1, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Batch(NamedTuple):
    ids: np.ndarray   # (B, L) int64, left-padded
    mask: np.ndarray  # (B, L) float64, 1 on real positions


def collate(prefixes: Sequence[Sequence[int]], max_len: Optional[int] = None) -> Batch:
    """Left-pad prefixes so every row ends at the last column; keep the last max_len items."""
    if not prefixes:
        raise EmptySequence()
    rows = [tuple(p)[-max_len:] if max_len else tuple(p) for p in prefixes]
    if any(len(r) == 0 for r in rows):
        raise EmptySequence()
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        ids[i, width - len(row):] = row
        mask[i, width - len(row):] = 1.0
    return Batch(ids, mask)


class GRUEncoder:
    name = "gru"

    def forward(self, params: ModelParams, batch: Batch):
        t = params.tensors
        emb = params.embeddings
        n_rows, width = batch.ids.shape
        h = np.zeros((n_rows, params.d))
        steps = []
        for col in range(width):
            x = emb[batch.ids[:, col]]
            m = batch.mask[:, col:col + 1]
            z = sigmoid(x @ t["W_z"] + h @ t["U_z"] + t["b_z"])
            r = sigmoid(x @ t["W_r"] + h @ t["U_r"] + t["b_r"])
            n = np.tanh(x @ t["W_n"] + (r * h) @ t["U_n"] + t["b_n"])
            candidate = (1.0 - z) * n + z * h
            steps.append((x, h, z, r, n, m))
            h = m * candidate + (1.0 - m) * h
        return h, steps

    def backward(self, params: ModelParams, batch: Batch, steps, dH: np.ndarray, grads: GradientBundle) -> None:
        t = params.tensors
        g = grads.tensors
        dh = dH
        for col in range(len(steps) - 1, -1, -1):
            x, h_prev, z, r, n, m = steps[col]
            dcand = m * dh
            dh_prev = (1.0 - m) * dh + dcand * z

            dz = dcand * (h_prev - n)
            da_n = dcand * (1.0 - z) * (1.0 - n * n)
            da_z = dz * z * (1.0 - z)

            rh = r * h_prev
            g["W_n"] += x.T @ da_n
            g["U_n"] += rh.T @ da_n
            g["b_n"] += da_n.sum(axis=0)
            drh = da_n @ t["U_n"].T
            dh_prev += drh * r
            da_r = drh * h_prev * r * (1.0 - r)

            g["W_r"] += x.T @ da_r
            g["U_r"] += h_prev.T @ da_r
            g["b_r"] += da_r.sum(axis=0)
            g["W_z"] += x.T @ da_z
            g["U_z"] += h_prev.T @ da_z
            g["b_z"] += da_z.sum(axis=0)

            dh_prev += da_r @ t["U_r"].T + da_z @ t["U_z"].T
            dx = da_n @ t["W_n"].T + da_r @ t["W_r"].T + da_z @ t["W_z"].T
            np.add.at(g["embeddings"], batch.ids[:, col], dx * m)
            dh = dh_prev


class MeanPoolEncoder:
    name = "mean"

    def forward(self, params: ModelParams, batch: Batch):
        lengths = batch.mask.sum(axis=1, keepdims=True)
        pooled = (params.embeddings[batch.ids] * batch.mask[:, :, None]).sum(axis=1)
        return pooled / lengths, lengths

    def backward(self, params: ModelParams, batch: Batch, lengths, dH: np.ndarray, grads: GradientBundle) -> None:
        per_row = dH / lengths
        for col in range(batch.ids.shape[1]):
            np.add.at(grads.tensors["embeddings"], batch.ids[:, col], per_row * batch.mask[:, col:col + 1])


ENCODERS = {"gru": GRUEncoder(), "mean": MeanPoolEncoder()}


class ForwardCache(NamedTuple):
    batch: Batch
    H: np.ndarray
    encoder_cache: object


def forward(params: ModelParams, batch: Batch) -> Tuple[ScoreVector, ForwardCache]:
    """Encode a batch and score every catalog item for every row."""
    H, enc_cache = ENCODERS[params.encoder].forward(params, batch)
    relevance = H @ params.embeddings.T
    return ScoreVector(relevance, softmax(relevance)), ForwardCache(batch, H, enc_cache)


def backward_batch(params: ModelParams, cache: ForwardCache, grad_relevance: np.ndarray) -> GradientBundle:
    """Chain rule from dLoss/drelevance (B, |V|) back to every parameter."""
    expected = (cache.H.shape[0], params.catalog_size)
    if grad_relevance.shape != expected:
        raise ShapeMismatch(f"upstream gradient {grad_relevance.shape} != {expected}")
    grads = GradientBundle.zeros_like(params)
    # relevance = H E^T
    grads.tensors["embeddings"] += grad_relevance.T @ cache.H
    dH = grad_relevance @ params.embeddings
    ENCODERS[params.encoder].backward(params, cache.batch, cache.encoder_cache, dH, grads)
    return grads


def encode(params: ModelParams, seq: InteractionSequence) -> SequenceRepr:
    validate_sequence(seq, params.catalog_size)
    H, _ = ENCODERS[params.encoder].forward(params, collate([seq.items]))
    return SequenceRepr(H[0])


def score_all(params: ModelParams, h: SequenceRepr) -> ScoreVector:
    relevance = params.embeddings @ h.h
    return ScoreVector(relevance, softmax(relevance))


def backward(params: ModelParams, seq: InteractionSequence, upstream_grad_on_relevance: np.ndarray) -> GradientBundle:
    upstream = np.asarray(upstream_grad_on_relevance, dtype=np.float64)
    if upstream.shape != (params.catalog_size,):
        raise ShapeMismatch(f"upstream gradient has shape {upstream.shape}, expected ({params.catalog_size},)")
    validate_sequence(seq, params.catalog_size)
    _, cache = forward(params, collate([seq.items]))
    return backward_batch(params, cache, upstream[None, :])


def score_prefixes(params: ModelParams, prefixes: Sequence[Sequence[int]], batch_size: int = 256,
                   max_len: Optional[int] = None) -> np.ndarray:
    """Relevance matrix (len(prefixes), |V|) computed in chunks."""
    out = np.empty((len(prefixes), params.catalog_size))
    for start in range(0, len(prefixes), batch_size):
        scores, _ = forward(params, collate(prefixes[start:start + batch_size], max_len))
        out[start:start + batch_size] = scores.relevance
    return out


# Checkpoint file: header, then little-endian float64 tensors in params.names() order
CHECKPOINT_MAGIC = b"CPFTCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ8s")


def save_checkpoint(params: ModelParams, path: Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.catalog_size, params.d,
                              params.encoder.encode("ascii").ljust(8, b"\0")))
        for name in params.names():
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    logger.info(f"Saved {params.encoder} checkpoint |V|={params.catalog_size} d={params.d} to {path}")


def load_checkpoint(path: Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    magic, version, catalog_size, d, tag = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a cpft checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    encoder = tag.rstrip(b"\0").decode("ascii")
    if encoder not in ENCODER_WEIGHTS:
        raise CheckpointFormatError(f"{path}: unknown encoder '{encoder}'")

    shapes = {"embeddings": (catalog_size, d)}
    for name in ENCODER_WEIGHTS[encoder]:
        shapes[name] = (d,) if name.startswith("b_") else (d, d)
    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise CheckpointFormatError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(encoder, tensors)
