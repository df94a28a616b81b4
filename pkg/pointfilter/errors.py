"""Exception types shared across the pointfilter pipeline."""

from pathlib import Path

import numpy as np


class PointfilterError(Exception):
    """Base class for every error the pipeline raises on purpose.

    `prefix` is the stable one-line tag the CLI prints in front of the message.
    """

    prefix = "error"
    exit_code = 1


class ParseError(PointfilterError):
    """Raised when a text file (cloud, mesh, manifest) cannot be parsed."""

    prefix = "parse error"

    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:"
            if line is not None:
                location += f"{line}:"
            location += " "
        elif line is not None:
            location = f"line {line}: "
        super().__init__(f"{location}{message}")


class EmptyInputError(PointfilterError, ValueError):
    """Raised when an operation needs at least one point and got none."""

    prefix = "empty input"


class ArgumentError(PointfilterError, ValueError):
    """Raised when an argument is outside the range an operation accepts."""

    prefix = "argument error"


class FileError(PointfilterError, OSError):
    """Raised when an input file is missing or unreadable."""

    prefix = "file error"


class WriteError(PointfilterError, OSError):
    """Raised when an output file cannot be written."""

    prefix = "write error"


class DegeneratePatchError(PointfilterError):
    """Raised when a patch has no ground-truth points; training skips it."""

    prefix = "degenerate patch"


class DegenerateGeometryError(PointfilterError):
    """Raised when a point set has no well-defined principal frame.

    `fallback` is the rotation callers should use instead (identity).
    """

    prefix = "degenerate geometry"

    def __init__(self, message: str):
        super().__init__(message)
        self.fallback = np.eye(3)


class ShapeError(PointfilterError, ValueError):
    """Raised when an array does not have the shape an operation expects."""

    prefix = "shape error"


class NumericError(PointfilterError, ArithmeticError):
    """Raised on non-finite input or output."""

    prefix = "numeric error"


class StateError(PointfilterError):
    """Raised when parameters, gradients and caches do not belong together."""

    prefix = "state error"


class FormatError(PointfilterError):
    """Raised when a parameter file is truncated or inconsistent."""

    prefix = "format error"


class TrainingError(PointfilterError):
    """Raised when training cannot make progress."""

    prefix = "training error"


class UsageError(PointfilterError, ValueError):
    """Raised for invalid command-line flags or config entries."""

    prefix = "usage error"
    exit_code = 2
