"""Exception types shared across the package."""


class WavecompError(Exception):
    """Base class for all package errors."""


class ConfigError(WavecompError, ValueError):
    """Invalid configuration value or unknown option."""


class DimensionError(WavecompError, ValueError):
    """Array or tensor shape does not match what a network expects."""


class DynamicsError(WavecompError, ValueError):
    """Rejected dynamics input (non-finite state, action or disturbance)."""


class ModelStateError(WavecompError, RuntimeError):
    """An object was used before it was ready (stale cache, unloaded model)."""


class TrainingError(WavecompError, RuntimeError):
    """Training diverged: non-finite loss or gradient."""


class FormatError(WavecompError, ValueError):
    """Checkpoint file is truncated or has the wrong magic/version."""


class TraceParseError(WavecompError, ValueError):
    """Malformed disturbance trace or trajectory CSV."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ReportError(WavecompError, RuntimeError):
    """Report generation could not find or use its input CSVs."""
