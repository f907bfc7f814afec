"""Exception hierarchy. The CLI maps each class to a process exit code."""


class ZsadError(Exception):
    exit_code = 1


class InputError(ZsadError, ValueError):
    """Malformed input to an encoder or scoring operation."""

    exit_code = 2


class ParameterError(ZsadError, ValueError):
    exit_code = 2


class FormatError(ZsadError, ValueError):
    """A prompt template, checkpoint or config file is not in the expected format."""

    exit_code = 2


class ValidationError(ZsadError, ValueError):
    """One or more invariant violations, reported together."""

    exit_code = 2

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class DataError(ZsadError):
    """A dataset sample cannot be decoded or lacks data the current mode needs."""

    exit_code = 2


class AssetError(ZsadError, FileNotFoundError):
    """Backbone weights or another external resource is missing."""

    exit_code = 3


class NumericError(ZsadError, ArithmeticError):
    exit_code = 4
