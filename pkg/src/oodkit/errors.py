"""Exception types shared across the package."""


class DataError(Exception):
    """Base class for data / validation failures (CLI exit code 2)."""


class ManifestError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TensorFormatError(DataError):
    pass


class DependencyError(DataError):
    """A requested score is missing a required field or fitted artifact."""


class FitError(DataError):
    """Density or model fitting failed."""


class TrainingDivergedError(DataError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step
