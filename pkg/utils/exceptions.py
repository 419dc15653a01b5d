from typing import Any, Dict, Optional


class PlacementError(Exception):
    """Base class for every error raised by the placement toolkit."""

    code: str = "placement_error"
    exit_status: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        """Machine-parsable form used by the CLI error line."""
        payload: Dict[str, Any] = {"error": self.code, "message": self.message}
        payload.update({k: v for k, v in self.details.items() if v is not None})
        return payload


class InputError(PlacementError):
    """Invalid argument, dimension mismatch or non-finite value."""

    code = "input_error"
    exit_status = 2


class RecordError(InputError):
    """A ride-request row that failed parsing or validation."""

    code = "record_error"

    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}", row=row, reason=reason)
        self.row = row
        self.reason = reason


class InsufficientDataError(PlacementError):
    """Not enough samples to compute an estimate."""

    code = "insufficient_data"
    exit_status = 2


class FitRangeError(PlacementError):
    """Fewer than three correlation-curve scales inside the fit range."""

    code = "fit_range_error"
    exit_status = 2

    def __init__(self, message: str, n_scales: Optional[int] = None):
        super().__init__(message, n_scales=n_scales)
        self.n_scales = n_scales


class ConfigError(PlacementError):
    """Configuration that cannot drive a run."""

    code = "config_error"
    exit_status = 2


class OutputError(PlacementError):
    """Input or output file that cannot be read or written."""

    code = "io_error"
    exit_status = 3
