"""Error types raised across the extraction lab."""

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    import numpy as np


class ExtractionLabError(Exception):
    """Base class for all lab-specific errors."""


class InputShapeError(ExtractionLabError, ValueError):
    """A sample or batch does not match the expected dimensionality."""


class NumericError(ExtractionLabError, ArithmeticError):
    """A forward pass or training step produced non-finite values."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class EmptyDatasetError(ExtractionLabError, ValueError):
    """An operation that needs samples received none."""


class DatasetFormatError(ExtractionLabError, ValueError):
    """A dataset file is empty, ragged or contains non-numeric cells."""


class TooFewSamplesError(ExtractionLabError, ValueError):
    """The Shapiro-Wilk statistic needs at least three values."""


class DegenerateSampleError(ExtractionLabError, ValueError):
    """All values of a sample are equal, so W is undefined."""


class FoldTrainingError(ExtractionLabError, RuntimeError):
    """Training failed inside one cross-validation fold."""

    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"Training failed in fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


class SearchFailedError(ExtractionLabError, RuntimeError):
    """Every hyperparameter evaluation of a CV-search failed."""


class GPFitError(ExtractionLabError, RuntimeError):
    """The GP kernel matrix could not be factorized even with jitter."""


class QueryDeniedError(ExtractionLabError, PermissionError):
    """A blocked client attempted another query."""

    def __init__(self, message: str, answered: "np.ndarray | None" = None):
        super().__init__(message)
        # Answered prefix of the denied batch, in the API's response format
        self.answered = answered


class EvasionInfeasibleError(ExtractionLabError, RuntimeError):
    """No dummy schedule within the cap keeps W above the threshold."""

    def __init__(self, index: int, message: str):
        super().__init__(f"Evasion infeasible at useful query {index}: {message}")
        self.index = index


class StageError(ExtractionLabError, RuntimeError):
    """An experiment stage failed; carries the stage tag."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage={stage}: {cause}")
        self.stage = stage
        self.cause = cause
