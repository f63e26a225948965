"""Exception hierarchy shared across the package."""


class MaskDistillError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskDistillError):
    """Config file could not be parsed."""


class ValidationError(MaskDistillError):
    """A config field violates an invariant."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DatasetError(MaskDistillError):
    """Dataset is missing, empty, or malformed."""


class ShapeError(MaskDistillError):
    """Array dimensions do not satisfy an operation's contract."""


class ContractError(MaskDistillError):
    """An input violates a documented precondition (e.g. non-unit norm)."""


class ParameterError(MaskDistillError):
    """An argument is out of the valid range for the operation."""


class TrainingError(MaskDistillError):
    """Training aborted (non-finite loss, etc.); carries diagnostics."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class CheckpointError(MaskDistillError):
    """Checkpoint missing, corrupt, or incompatible with the config."""
