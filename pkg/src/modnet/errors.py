"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2, data
problems exit 3, numerical/runtime problems exit 4.
"""


class ModnetError(Exception):
    """Base class for package errors."""


class ConfigError(ModnetError):
    """Invalid configuration value or combination."""


class DataFormatError(ModnetError):
    """Malformed or inconsistent input data file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StructureMismatchError(ModnetError):
    """Parameter key set does not match the module/parent structure."""


class SingularModelError(ModnetError):
    """I - W is singular or too ill-conditioned to evaluate."""


class GenerationError(ModnetError):
    """Synthetic generation could not satisfy its constraints."""
