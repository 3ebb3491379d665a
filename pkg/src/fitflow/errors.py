"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FitflowError(Exception):
    """Base class for every error raised by fitflow."""


class ContractError(FitflowError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class ConfigError(FitflowError, ValueError):
    """A configuration value is invalid or inconsistent."""


class VocabularyError(ContractError):
    """A symbol is not part of the vocabulary."""


class TrainingError(FitflowError, RuntimeError):
    """Training diverged or produced non-finite values."""


class SamplingError(FitflowError, RuntimeError):
    """ODE integration produced a non-finite state."""


class ConstructionError(FitflowError, RuntimeError):
    """A benchmark subset could not be built under the requested constraints."""


class FormatError(FitflowError, ValueError):
    """A binary or text file does not follow its declared format."""


class StaleArtifactError(FitflowError, RuntimeError):
    """A persisted artifact does not match the configuration or its checksum."""


class MissingArtifactError(FitflowError, FileNotFoundError):
    """One or more expected run artifacts are absent."""
