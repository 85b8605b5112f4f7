"""
Tests for domain types, sequence validation and the error hierarchy.
"""
import pytest
from pydantic import ValidationError

from cpft.core import (
    CPFTError,
    DataError,
    EmptySequence,
    InteractionSequence,
    OutOfCatalog,
    SequenceSplit,
    ShapeMismatch,
    TooShort,
    UnknownConfigKey,
    validate_sequence,
)


class TestValidateSequence:
    """Tests for catalog validation."""

    def test_valid_sequence(self):
        validate_sequence(InteractionSequence(user=0, items=(0, 1, 2)), catalog_size=3)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequence):
            validate_sequence(InteractionSequence(user=4, items=()), catalog_size=3)

    def test_item_equal_to_catalog_size_is_out_of_catalog(self):
        with pytest.raises(OutOfCatalog) as exc:
            validate_sequence(InteractionSequence(user=0, items=(0, 1, 3)), catalog_size=3)
        assert exc.value.item == 3
        assert exc.value.position == 2

    def test_negative_item_is_out_of_catalog(self):
        with pytest.raises(OutOfCatalog) as exc:
            validate_sequence(InteractionSequence(user=0, items=(-1,)), catalog_size=3)
        assert exc.value.position == 0

    def test_negative_user_rejected(self):
        with pytest.raises(ValidationError):
            InteractionSequence(user=-1, items=(0,))


class TestSequenceSplit:
    """Leave-one-out partition of a sequence."""

    def test_three_items(self):
        s = SequenceSplit(user=0, items=(1, 2, 3))
        assert s.train_prefix.items == (1,)
        assert s.calib_prefix.items == (1, 2)
        assert s.valid_target == 2
        assert s.calib_target == 3
        assert s.test_target == 3

    def test_reconstruction(self):
        items = (9, 4, 4, 7, 1, 0)
        s = SequenceSplit(user=2, items=items)
        rebuilt = s.train_prefix.items + (s.calib_prefix.last,) + (s.calib_target,)
        assert rebuilt == items

    def test_too_short(self):
        with pytest.raises(TooShort) as exc:
            SequenceSplit(user=0, items=(1, 2))
        assert exc.value.length == 2


class TestErrorHierarchy:
    """The CLI maps these families to exit codes."""

    def test_data_errors_are_cpft_errors(self):
        assert issubclass(EmptySequence, DataError)
        assert issubclass(DataError, CPFTError)

    def test_numeric_contract_errors_are_value_errors(self):
        assert issubclass(ShapeMismatch, ValueError)
        assert issubclass(ShapeMismatch, CPFTError)

    def test_unknown_config_key_is_key_error(self):
        assert issubclass(UnknownConfigKey, KeyError)
