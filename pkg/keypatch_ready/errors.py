# -*- coding: utf-8 -*-
"""
Exception hierarchy for keypatch-ready.

Every error carries the exit code the command-line tool reports for it:
2 for configuration / argument problems, 3 for data problems and
4 for runtime failures.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class KeypatchError(Exception):
    """Base class of all keypatch-ready errors"""
    exit_code = EXIT_RUNTIME


class ConfigError(KeypatchError, ValueError):
    """Configuration document is malformed or names unknown keys"""
    exit_code = EXIT_CONFIG


class InvalidArgumentError(KeypatchError, ValueError):
    """An argument violates its documented precondition"""
    exit_code = EXIT_CONFIG


class ConstraintInfeasibleError(KeypatchError):
    """Placement constraints cannot be met for the given image size"""
    exit_code = EXIT_CONFIG


class DegenerateProjectionError(KeypatchError, ArithmeticError):
    """A point maps to infinity under a homography"""


class OutOfBoundsPlacementError(KeypatchError):
    """A warped footprint does not touch the canvas at all"""


class EmptyCorpusError(KeypatchError):
    """Background corpus contains no usable images"""
    exit_code = EXIT_DATA


class AnnotationInconsistentError(KeypatchError):
    """Annotation contents contradict the image they describe"""
    exit_code = EXIT_DATA


class UnsupportedFormatError(KeypatchError):
    """Manifest or checkpoint format version is not supported"""
    exit_code = EXIT_DATA


class RecordCorruptError(KeypatchError):
    """A dataset record cannot be parsed"""
    exit_code = EXIT_DATA

    def __init__(self, index, reason):
        super().__init__(f"record {index} is corrupt: {reason}")
        self.index = index
        self.reason = reason


class ShapeError(KeypatchError, ValueError):
    """Tensor or image dimensions violate the /8 grid contract"""


class WeightMismatchError(KeypatchError):
    """Weight file does not provide the parameters the network needs"""
    exit_code = EXIT_DATA


class NumericError(KeypatchError, ArithmeticError):
    """A loss component is not finite"""


class TrainingDivergedError(KeypatchError):
    """Training produced a non-finite loss"""

    def __init__(self, epoch, step, value):
        super().__init__(f"training diverged at epoch {epoch}, step {step} (loss={value})")
        self.epoch = epoch
        self.step = step
        self.value = value


def exit_code_for(exc):
    """Map an exception to the CLI exit code"""
    if isinstance(exc, KeypatchError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, NotADirectoryError)):
        return EXIT_DATA
    if isinstance(exc, PermissionError):
        return EXIT_CONFIG
    return EXIT_RUNTIME
