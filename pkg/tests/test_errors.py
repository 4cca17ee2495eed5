import pytest

from keypatch_ready import errors
from keypatch_ready.errors import exit_code_for


@pytest.mark.parametrize("exc, code", [
    (errors.ConfigError("x"), 2),
    (errors.InvalidArgumentError("x"), 2),
    (errors.ConstraintInfeasibleError("x"), 2),
    (errors.EmptyCorpusError("x"), 3),
    (errors.UnsupportedFormatError("x"), 3),
    (errors.RecordCorruptError(3, "bad json"), 3),
    (errors.WeightMismatchError("x"), 3),
    (errors.ShapeError("x"), 4),
    (errors.NumericError("x"), 4),
    (errors.TrainingDivergedError(2, 10, float("nan")), 4),
    (FileNotFoundError("x"), 3),
    (PermissionError("x"), 2),
    (RuntimeError("x"), 4),
])
def test_exit_codes(exc, code):
    assert exit_code_for(exc) == code


def test_argument_errors_are_value_errors():
    assert issubclass(errors.InvalidArgumentError, ValueError)
    assert issubclass(errors.ShapeError, ValueError)
    assert issubclass(errors.DegenerateProjectionError, ArithmeticError)


def test_record_corrupt_carries_index():
    exc = errors.RecordCorruptError(7, "label file missing")
    assert exc.index == 7
    assert "record 7" in str(exc)
