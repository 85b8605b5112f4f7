"""
Interaction data: ingestion, vocabulary, leave-one-out splits, synthetic
Markov users, and the binary dataset cache.
"""
from __future__ import annotations

import csv
import logging
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import (
    MIN_SEQUENCE_LENGTH,
    DatasetFormatError,
    InteractionSequence,
    MalformedRow,
    SequenceSplit,
    TooShort,
    UnsortableTimestamps,
    validate_sequence,
)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user", "item", "timestamp")
DELIMITERS = {"tsv": "\t", "csv": ","}


class DatasetStats(BaseModel):
    """Per-dataset summary: #Users, #Items, #Inters, Avg.U, Avg.I."""

    n_users: int
    n_items: int
    n_interactions: int
    avg_per_user: float
    avg_per_item: float
    dropped_users: int = 0


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    sequences: Tuple[InteractionSequence, ...]
    catalog_size: int = Field(ge=1)
    dropped_users: int = 0
    vocabulary: Optional[Dict[str, int]] = None

    @model_validator(mode="after")
    def _check_catalog(self) -> "Dataset":
        for seq in self.sequences:
            validate_sequence(seq, self.catalog_size)
        return self

    @property
    def splits(self) -> List[SequenceSplit]:
        return split(self)

    def stats(self) -> DatasetStats:
        n_inter = sum(len(s) for s in self.sequences)
        n_users = len(self.sequences)
        return DatasetStats(
            n_users=n_users,
            n_items=self.catalog_size,
            n_interactions=n_inter,
            avg_per_user=n_inter / n_users if n_users else 0.0,
            avg_per_item=n_inter / self.catalog_size,
            dropped_users=self.dropped_users,
        )


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_users: int = Field(1000, ge=1)
    n_items: int = Field(200, ge=2)
    min_len: int = Field(5, ge=MIN_SEQUENCE_LENGTH)
    max_len: int = Field(20, ge=MIN_SEQUENCE_LENGTH)
    transition_concentration: float = Field(0.9, gt=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_lengths(self) -> "SynthSpec":
        if self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")
        return self


def split_sequence(seq: InteractionSequence) -> SequenceSplit:
    if len(seq) < MIN_SEQUENCE_LENGTH:
        raise TooShort(len(seq))
    return SequenceSplit(user=seq.user, items=seq.items)


def split(dataset: Dataset) -> List[SequenceSplit]:
    return [split_sequence(seq) for seq in dataset.sequences]


class Example(NamedTuple):
    """A (prefix -> target) pair for one user."""

    user: int
    prefix: Tuple[int, ...]
    target: int


def supervised_examples(splits: Sequence[SequenceSplit], positions: str = "final") -> List[Example]:
    """
    Next-item pairs inside each training prefix. "final" keeps only the pair
    ending at the prefix's last item; "all" keeps every position.
    """
    out: List[Example] = []
    for s in splits:
        items = s.train_prefix.items
        if len(items) < 2:
            continue
        starts = range(1, len(items)) if positions == "all" else (len(items) - 1,)
        for t in starts:
            out.append(Example(s.user, items[:t], items[t]))
    return out


def validation_examples(splits: Sequence[SequenceSplit]) -> List[Example]:
    """train_prefix -> penultimate item: the LOO validation pair."""
    return [Example(s.user, s.train_prefix.items, s.valid_target) for s in splits]


def calibration_examples(splits: Sequence[SequenceSplit], use_validation: bool = True) -> List[Example]:
    """Pairs scored for conformal calibration during fine-tuning. Never touches the last item."""
    if use_validation:
        return validation_examples(splits)
    return supervised_examples(splits, "final")


def test_examples(splits: Sequence[SequenceSplit]) -> List[Example]:
    return [Example(s.user, s.calib_prefix.items, s.test_target) for s in splits]


def _ragged_line(path: Path, sep: str) -> Optional[Tuple[int, int, int]]:
    """First (line number, expected, seen) whose field count differs from the header's."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh, delimiter=sep)
        expected = None
        for row in rows:
            if not row:
                continue
            if expected is None:
                expected = len(row)
            elif len(row) != expected:
                return rows.line_num, expected, len(row)
    return None


def _read_frame(path: Path, fmt: str) -> pd.DataFrame:
    if fmt not in DELIMITERS:
        raise DatasetFormatError(f"unsupported format '{fmt}' (expected tsv or csv)")
    sep = DELIMITERS[fmt]
    try:
        frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        ragged = _ragged_line(path, sep)
        if ragged is None:
            raise MalformedRow(0, str(e)) from e
        line, expected, seen = ragged
        raise MalformedRow(line, f"expected {expected} fields, saw {seen}") from e
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetFormatError(f"{path}: missing columns {missing}")
    frame = frame[list(REQUIRED_COLUMNS)]
    # short rows come back padded with NaN
    short = frame.isna().any(axis=1)
    if short.any():
        ragged = _ragged_line(path, sep)
        line = ragged[0] if ragged else int(short.idxmax()) + 2
        raise MalformedRow(line, "missing field")
    frame = frame.apply(lambda col: col.str.strip())
    empty = (frame == "").any(axis=1)
    if empty.any():
        # header is line 1
        raise MalformedRow(int(empty.idxmax()) + 2, "empty field")
    return frame


def _sortable_timestamps(column: pd.Series) -> pd.Series:
    numeric = pd.to_numeric(column, errors="coerce")
    if not numeric.isna().any():
        return numeric
    parsed = pd.to_datetime(column, errors="coerce", utc=True)
    if not parsed.isna().any():
        return parsed
    raise UnsortableTimestamps(
        f"{int(numeric.isna().sum())} timestamps are neither numeric nor dates (first: {column[numeric.isna()].iloc[0]!r})"
    )


def ingest(path: Path, fmt: str = "tsv") -> Dataset:
    """
    Load a delimiter-separated log with columns user, item, timestamp.

    Rows are grouped by user in order of first appearance, sorted by timestamp
    (ties keep file order), and items are mapped to dense ids. Users with fewer
    than three interactions are dropped. Duplicate rows are kept.
    """
    path = Path(path)
    frame = _read_frame(path, fmt)
    frame["ts"] = _sortable_timestamps(frame["timestamp"])
    user_order = pd.unique(frame["user"])
    # mergesort is stable, so equal timestamps keep file order
    ordered = frame.sort_values("ts", kind="mergesort")

    grouped = {user: group["item"].tolist() for user, group in ordered.groupby("user", sort=False)}
    kept_users = [u for u in user_order if len(grouped[u]) >= MIN_SEQUENCE_LENGTH]
    dropped = len(grouped) - len(kept_users)
    if dropped:
        logger.info(f"Dropped {dropped} users with fewer than {MIN_SEQUENCE_LENGTH} interactions")

    # dense item ids by first appearance in file order among kept users
    kept = frame.loc[frame["user"].isin(kept_users)]
    vocabulary = {raw: i for i, raw in enumerate(pd.unique(kept["item"]))}

    sequences = tuple(
        InteractionSequence(user=dense_user, items=tuple(vocabulary[i] for i in grouped[raw_user]))
        for dense_user, raw_user in enumerate(kept_users)
    )
    dataset = Dataset(sequences=sequences, catalog_size=max(1, len(vocabulary)), dropped_users=dropped,
                      vocabulary=vocabulary)
    _log_stats(dataset, f"ingested {path}")
    return dataset


def _log_stats(dataset: Dataset, label: str) -> None:
    st = dataset.stats()
    logger.info(
        f"{label}: #Users={st.n_users} #Items={st.n_items} #Inters={st.n_interactions} "
        f"Avg.U={st.avg_per_user:.2f} Avg.I={st.avg_per_item:.2f} dropped={st.dropped_users}"
    )


def write_vocabulary(vocabulary: Dict[str, int], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw, dense in sorted(vocabulary.items(), key=lambda kv: kv[1]):
            fh.write(f"{raw}\t{dense}\n")


def read_vocabulary(path: Path) -> Dict[str, int]:
    frame = pd.read_csv(path, sep="\t", header=None, names=["raw_id", "dense_id"], dtype={"raw_id": str, "dense_id": int},
                        keep_default_na=False)
    return dict(zip(frame["raw_id"], frame["dense_id"]))


class MarkovChain(NamedTuple):
    successor: np.ndarray  # designated next item per item
    concentration: float

    @property
    def n_items(self) -> int:
        return self.successor.shape[0]

    def transition_matrix(self) -> np.ndarray:
        n = self.n_items
        matrix = np.full((n, n), (1.0 - self.concentration) / (n - 1))
        matrix[np.arange(n), self.successor] = self.concentration
        return matrix


def build_chain(spec: SynthSpec) -> MarkovChain:
    rng = np.random.default_rng(spec.seed)
    # shift a random permutation so no item is its own successor
    order = rng.permutation(spec.n_items)
    successor = np.empty(spec.n_items, dtype=np.int64)
    successor[order] = np.roll(order, -1)
    return MarkovChain(successor, spec.transition_concentration)


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Users walking a random Markov chain; each user has its own derived seed."""
    chain = build_chain(spec)
    n = spec.n_items
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_users)
    sequences = []
    for user, child in enumerate(children):
        rng = np.random.default_rng(child)
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        items = [int(rng.integers(n))]
        follow = rng.random(length - 1) < spec.transition_concentration
        # uniform over the n - 1 non-successor items
        other = rng.integers(n - 1, size=length - 1)
        for step in range(length - 1):
            nxt = int(chain.successor[items[-1]])
            if not follow[step]:
                alt = int(other[step])
                nxt = alt if alt < nxt else alt + 1
            items.append(nxt)
        sequences.append(InteractionSequence(user=user, items=tuple(items)))
    dataset = Dataset(sequences=tuple(sequences), catalog_size=n)
    _log_stats(dataset, f"synthetic seed={spec.seed} concentration={spec.transition_concentration}")
    return dataset


# Binary cache: header, then int64 users, lengths and the concatenated items
DATASET_MAGIC = b"CPFTDSET"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")


def save_dataset(dataset: Dataset, path: Path) -> None:
    users = np.array([s.user for s in dataset.sequences], dtype="<i8")
    lengths = np.array([len(s) for s in dataset.sequences], dtype="<i8")
    items = np.array([i for s in dataset.sequences for i in s.items], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, dataset.catalog_size, len(users), dataset.dropped_users))
        fh.write(users.tobytes())
        fh.write(lengths.tobytes())
        fh.write(items.tobytes())
    logger.info(f"Saved dataset ({len(users)} users, |V|={dataset.catalog_size}) to {path}")


def load_dataset(path: Path, vocabulary_path: Optional[Path] = None) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, catalog_size, n_users, dropped = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: not a version {DATASET_VERSION} cpft dataset")
    offset = _HEADER.size
    if len(raw) < offset + 16 * n_users:
        raise DatasetFormatError(f"{path}: truncated user table")
    users = np.frombuffer(raw, dtype="<i8", count=n_users, offset=offset)
    offset += 8 * n_users
    lengths = np.frombuffer(raw, dtype="<i8", count=n_users, offset=offset)
    offset += 8 * n_users
    total = int(lengths.sum())
    if offset + 8 * total != len(raw):
        raise DatasetFormatError(f"{path}: size does not match header")
    items = np.frombuffer(raw, dtype="<i8", count=total, offset=offset)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    sequences = tuple(
        InteractionSequence(user=int(u), items=tuple(int(i) for i in items[bounds[k]:bounds[k + 1]]))
        for k, u in enumerate(users)
    )
    vocabulary = read_vocabulary(vocabulary_path) if vocabulary_path else None
    return Dataset(sequences=sequences, catalog_size=catalog_size, dropped_users=dropped, vocabulary=vocabulary)
