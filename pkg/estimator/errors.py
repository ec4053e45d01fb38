"""
Exception hierarchy for the estimator package.

Library code raises these; the CLI is the only place that turns them into
process exit codes and the machine-readable error line.
"""

from typing import Any, Dict, Optional


class EstimatorError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 1

    def to_record(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "code": self.exit_code,
            "message": str(self),
        }


class ConfigurationError(EstimatorError):
    exit_code = 2


class DomainError(EstimatorError, ValueError):
    exit_code = 2


class RangeError(EstimatorError):
    exit_code = 2


class NormalizationError(EstimatorError):
    exit_code = 2


class LabelRangeError(EstimatorError, ValueError):
    exit_code = 2


class UndefinedCorrelationError(EstimatorError, ValueError):
    exit_code = 2


class MissingFileError(EstimatorError, FileNotFoundError):
    exit_code = 3


class FormatError(EstimatorError):
    exit_code = 4


class DatasetFormatError(FormatError):
    pass


class CheckpointFormatError(FormatError):
    pass


class LengthMismatchError(EstimatorError, ValueError):
    exit_code = 5


class ShapeMismatchError(EstimatorError, ValueError):
    exit_code = 5


class SimulationDivergedError(EstimatorError):
    """Integrator produced a non-finite state"""

    exit_code = 6

    def __init__(self, step: int, message: Optional[str] = None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        record["step"] = self.step
        return record


class GenerationAbortedError(EstimatorError):
    exit_code = 6


class TrainingDivergedError(EstimatorError):
    """Non-finite loss during training; keeps the best weights seen so far"""

    exit_code = 7

    def __init__(self, message: str, epoch: int, best_weights: Any = None, diagnostics: Optional[Dict[str, Any]] = None):
        self.epoch = epoch
        self.best_weights = best_weights
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def to_record(self) -> Dict[str, Any]:
        record = super().to_record()
        record["epoch"] = self.epoch
        record["diagnostics"] = self.diagnostics
        return record
