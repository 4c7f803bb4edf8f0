"""Exception hierarchy shared by every SimStore module."""


class SimStoreError(Exception):
    """Base class for all errors raised by simstore_orl."""


class ConfigError(SimStoreError):
    """A configuration file or object is invalid."""


class SimulationError(SimStoreError):
    """The simulator reached a state it cannot continue from."""


class ContractViolation(SimStoreError):
    """An operation was called outside of its precondition."""


class DatasetParseError(SimStoreError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line_number: int = 0):
        if line_number:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class TrainingError(SimStoreError):
    """Training an offline policy failed."""


class ReportError(SimStoreError):
    """Evaluation results cannot be normalised or reported."""
