"""
Exception hierarchy for the forecasting toolkit.

The CLI maps these onto exit codes:
- ValidationError / ConfigError -> 1
- everything else -> 2
"""

from typing import Optional


class ForecastingError(Exception):
    """Base class for every error raised by the toolkit."""

    kind = "runtime"
    exit_code = 2


class ValidationError(ForecastingError):
    """Input data failed validation."""

    kind = "validation"
    exit_code = 1

    def __init__(self, message: str, path: Optional[str] = None, row: Optional[int] = None):
        self.path = path
        self.row = row
        context = []
        if path is not None:
            context.append(f"file={path}")
        if row is not None:
            context.append(f"row={row}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class ConfigError(ForecastingError):
    """Configuration file or override is invalid."""

    kind = "config"
    exit_code = 1


class DegenerateSeriesError(ForecastingError):
    """Series history has a zero scale denominator."""

    kind = "degenerate"


class MissingSeriesError(ForecastingError):
    """A series required for aggregation or scoring is absent."""

    kind = "missing-series"


class SchemaMismatchError(ForecastingError):
    """Feature schema of a matrix differs from the one a model was fitted on."""

    kind = "schema"


class TrainingDivergedError(ForecastingError):
    """Training loss became non-finite."""

    kind = "diverged"

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
            message = f"{message} [{details}]"
        super().__init__(message)
