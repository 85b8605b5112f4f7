"""
Domain types and the error hierarchy shared by every cpft module.

Types here carry validation only; behaviour lives in the modules that use them.
"""
from __future__ import annotations

from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


MIN_SEQUENCE_LENGTH = 3


class CPFTError(Exception):
    """Base class for every error raised by cpft."""


# Data problems (CLI exit code 2)

class DataError(CPFTError):
    pass


class EmptySequence(DataError):
    def __init__(self, user: Optional[int] = None):
        self.user = user
        super().__init__(f"empty interaction sequence (user={user})")


class OutOfCatalog(DataError):
    def __init__(self, item: int, position: int):
        self.item = item
        self.position = position
        super().__init__(f"item {item} at position {position} is outside the catalog")


class TooShort(DataError):
    def __init__(self, length: int, minimum: int = MIN_SEQUENCE_LENGTH):
        self.length = length
        self.minimum = minimum
        super().__init__(f"sequence of length {length} is shorter than {minimum}")


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"malformed row at line {line}" + (f": {reason}" if reason else ""))


class UnsortableTimestamps(DataError):
    pass


class NoEligibleUsers(DataError):
    pass


class DatasetFormatError(DataError):
    pass


class CheckpointFormatError(DataError):
    pass


# Training problems

class TrainingError(CPFTError):
    pass


class DivergenceDetected(TrainingError):
    """Raised when a loss becomes non-finite (CLI exit code 3)."""


class EmptyCalibrationBatch(TrainingError):
    pass


# Numeric contract violations

class ShapeMismatch(CPFTError, ValueError):
    pass


class EmptyScores(CPFTError, ValueError):
    pass


class LengthMismatch(CPFTError, ValueError):
    pass


class EmptyBatch(CPFTError, ValueError):
    pass


class NonPositiveTau(CPFTError, ValueError):
    pass


class ZeroNormEmbedding(CPFTError, ValueError):
    pass


class UnknownConfigKey(CPFTError, KeyError):
    pass


class InteractionSequence(BaseModel):
    """One user's chronologically ordered dense item ids."""

    model_config = ConfigDict(frozen=True)

    user: int = Field(ge=0)
    items: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def last(self) -> int:
        return self.items[-1]


def validate_sequence(seq: InteractionSequence, catalog_size: int) -> None:
    """
    Check a sequence against the catalog.

    Raises:
        EmptySequence: the sequence has no items
        OutOfCatalog: an item index is negative or >= catalog_size
    """
    if len(seq.items) == 0:
        raise EmptySequence(seq.user)
    for position, item in enumerate(seq.items):
        if item < 0 or item >= catalog_size:
            raise OutOfCatalog(item, position)


class SequenceSplit(BaseModel):
    """
    Leave-one-out partition of a sequence v1..vT.

    train_prefix = v1..v(T-2), calib_prefix = v1..v(T-1), calib_target = test_target = vT.
    valid_target is the penultimate item v(T-1), the only held-out item fine-tuning may read.
    Everything is derived from `items`, so train_prefix ++ [calib_prefix.last] ++ [calib_target]
    always reproduces the sequence.
    """

    model_config = ConfigDict(frozen=True)

    user: int = Field(ge=0)
    items: Tuple[int, ...]

    @model_validator(mode="after")
    def _long_enough(self) -> "SequenceSplit":
        if len(self.items) < MIN_SEQUENCE_LENGTH:
            raise TooShort(len(self.items))
        return self

    @property
    def train_prefix(self) -> InteractionSequence:
        return InteractionSequence(user=self.user, items=self.items[:-2])

    @property
    def calib_prefix(self) -> InteractionSequence:
        return InteractionSequence(user=self.user, items=self.items[:-1])

    @property
    def valid_target(self) -> int:
        return self.items[-2]

    @property
    def calib_target(self) -> int:
        return self.items[-1]

    @property
    def test_target(self) -> int:
        return self.items[-1]
