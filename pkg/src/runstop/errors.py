"""Exception types shared across the pipeline."""


class RunstopError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(RunstopError):
    """Input file does not conform to the documented column schema."""


class IngestError(RunstopError):
    """Too many unparseable rows, or an otherwise unusable input file."""


class ConfigError(RunstopError):
    """Invalid configuration value or file."""


class DependencyError(RunstopError):
    """A pipeline stage was run before the artifacts it depends on exist."""


class ConvergenceError(RunstopError):
    """Iterative model fit failed to converge within its budget.

    Carries the per-iteration deviance trace so the failure can be audited.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
