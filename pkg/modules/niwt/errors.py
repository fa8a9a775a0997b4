from __future__ import annotations

from autodiff.tensor import AutodiffError
from autodiff.tensor import NumericalError as _AutodiffNumericalError
from autodiff.tensor import ShapeError as _AutodiffShapeError


class NiwtError(Exception):
    """Base class for pipeline errors; ``exit_code`` is what the CLI returns."""
    exit_code = 1


class ConfigError(NiwtError, ValueError):
    """Invalid configuration value, empty sweep grid or infeasible split."""
    exit_code = 2


class MissingArtifactError(NiwtError, FileNotFoundError):
    """A prerequisite artifact (checkpoint, map, dataset) does not exist."""
    exit_code = 3

    def __init__(self, artifact: str, path: str = ""):
        self.artifact = artifact
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"missing prerequisite artifact: {artifact}{where}")


class NumericalError(NiwtError, ArithmeticError):
    """Non-finite loss or metric."""
    exit_code = 4


class DegenerateRanksError(NiwtError, ValueError):
    """Rank correlation requested for a zero-variance vector."""
    exit_code = 4


class LeakageError(NiwtError):
    """An unseen-class instance reached a training or map-fitting path."""
    exit_code = 4


class FormatError(NiwtError, ValueError):
    """Malformed container, CSV or manifest file."""
    exit_code = 2


# Engine-level errors keep their own classes; the CLI maps them here.
ShapeError = _AutodiffShapeError
EngineNumericalError = _AutodiffNumericalError


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, NiwtError):
        return error.exit_code
    if isinstance(error, _AutodiffNumericalError):
        return NumericalError.exit_code
    if isinstance(error, _AutodiffShapeError):
        return ConfigError.exit_code
    if isinstance(error, AutodiffError):
        return NumericalError.exit_code
    return 1


__all__ = [
    "NiwtError",
    "ConfigError",
    "MissingArtifactError",
    "NumericalError",
    "EngineNumericalError",
    "ShapeError",
    "DegenerateRanksError",
    "LeakageError",
    "FormatError",
    "exit_code_for",
]
