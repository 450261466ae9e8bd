"""Exception types shared across the package."""


class UmlabError(Exception):
    """Base class for all umlab errors."""


class ParameterError(UmlabError, ValueError):
    """An argument or configuration value violates a precondition."""


class FormatError(UmlabError, ValueError):
    """A data or checkpoint file does not follow its declared format.

    `line` is the 1-based line number where parsing failed, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SamplingError(UmlabError, ValueError):
    """An episode or fold cannot be sampled from the given data."""


class ConfigError(UmlabError, ValueError):
    """A training config file contains unknown keys or bad values."""
